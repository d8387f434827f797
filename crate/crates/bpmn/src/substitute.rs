//! `${name}` placeholders in URLs, bodies and topic patterns.

use std::sync::LazyLock;

use regex::{Captures, Regex};

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern"));

/// Replaces every placeholder; `Err` names the first unresolved variable.
pub fn substitute(
    template: &str,
    lookup: impl Fn(&str) -> Option<String>,
    escape_json: bool,
) -> Result<String, String> {
    let mut missing = None;
    let out = PLACEHOLDER.replace_all(template, |c: &Captures| match lookup(&c[1]) {
        Some(v) if escape_json => {
            let quoted = serde_json::to_string(&v).unwrap_or_default();
            quoted[1..quoted.len() - 1].to_string()
        }
        Some(v) => v,
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(name) => Err(name),
        None => Ok(out.into_owned()),
    }
}

pub fn placeholders(template: &str) -> Vec<String> {
    PLACEHOLDER.captures_iter(template).map(|c| c[1].to_string()).collect()
}

pub(crate) fn blank_placeholders(template: &str) -> String {
    PLACEHOLDER.replace_all(template, "x").into_owned()
}
