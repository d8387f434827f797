//! Gateway conditions.
//!
//! ```text
//! cond    := ident op literal | ident
//! op      := == | !=
//! literal := 'string' | number | true | false
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("bad expression {text:?} at {position}: {reason}")]
pub struct ExprError {
    pub text: String,
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Bool(bool),
    Number(f64),
    Str(String),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Bool(b) => Value::Bool(*b),
            Literal::Number(n) => serde_json::Number::from_f64(*n).map(Value::Number).unwrap_or(Value::Null),
            Literal::Str(s) => Value::String(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Truthy(String),
    Compare { var: String, op: CmpOp, literal: Literal },
}

/// Outcome of evaluating a condition; `warning` is set when the result was
/// forced to false by a missing variable or a type mismatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: bool,
    pub warning: Option<String>,
}

impl Condition {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        Parser { text, pos: 0 }.condition()
    }

    pub fn variable(&self) -> &str {
        match self {
            Condition::Truthy(v) | Condition::Compare { var: v, .. } => v,
        }
    }

    pub fn evaluate(&self, vars: &serde_json::Map<String, Value>) -> Evaluation {
        let ok = |result| Evaluation { result, warning: None };
        let warn = |w: String| Evaluation {
            result: false,
            warning: Some(w),
        };
        let Some(value) = vars.get(self.variable()) else {
            return warn(format!("variable {} is not set", self.variable()));
        };
        match self {
            Condition::Truthy(v) => match value {
                Value::Bool(b) => ok(*b),
                other => warn(format!("{v} is {other}, not a boolean")),
            },
            Condition::Compare { var, op, literal } => {
                let equal = match (literal, value) {
                    (Literal::Bool(a), Value::Bool(b)) => a == b,
                    (Literal::Str(a), Value::String(b)) => a == b,
                    (Literal::Number(a), Value::Number(b)) => b.as_f64() == Some(*a),
                    (_, other) => return warn(format!("{var} is {other}, cannot compare with {literal}")),
                };
                ok(match op {
                    CmpOp::Eq => equal,
                    CmpOp::Ne => !equal,
                })
            }
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Bool(b) => write!(f, "{b}"),
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Str(s) => write!(f, "'{s}'"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Truthy(v) => f.write_str(v),
            Condition::Compare { var, op, literal } => {
                let op = match op {
                    CmpOp::Eq => "==",
                    CmpOp::Ne => "!=",
                };
                write!(f, "{var} {op} {literal}")
            }
        }
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, reason: impl Into<String>) -> ExprError {
        ExprError {
            text: self.text.to_string(),
            position: self.pos,
            reason: reason.into(),
        }
    }

    fn rest(&self) -> &str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.text.len() - trimmed.len();
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &str {
        let start = self.pos;
        let len = self.rest().find(|c| !f(c)).unwrap_or(self.rest().len());
        self.pos += len;
        &self.text[start..self.pos]
    }

    fn condition(mut self) -> Result<Condition, ExprError> {
        self.skip_ws();
        let ident = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_').to_string();
        if !is_identifier(&ident) {
            return Err(self.err("expected a variable name"));
        }
        self.skip_ws();
        if self.rest().is_empty() {
            return Ok(Condition::Truthy(ident));
        }
        let op = if self.rest().starts_with("==") {
            CmpOp::Eq
        } else if self.rest().starts_with("!=") {
            CmpOp::Ne
        } else {
            return Err(self.err("expected == or !="));
        };
        self.pos += 2;
        self.skip_ws();
        let literal = self.literal()?;
        self.skip_ws();
        if !self.rest().is_empty() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(Condition::Compare {
            var: ident,
            op,
            literal,
        })
    }

    fn literal(&mut self) -> Result<Literal, ExprError> {
        if let Some(body) = self.rest().strip_prefix('\'') {
            let Some(end) = body.find('\'') else {
                return Err(self.err("unterminated string literal"));
            };
            let s = body[..end].to_string();
            self.pos += end + 2;
            return Ok(Literal::Str(s));
        }
        let start = self.pos;
        let word = self
            .take_while(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+' | '_'))
            .to_string();
        match word.as_str() {
            "true" => Ok(Literal::Bool(true)),
            "false" => Ok(Literal::Bool(false)),
            w if !w.is_empty() && w.starts_with(|c: char| c.is_ascii_digit() || c == '-') => match w.parse::<f64>() {
                Ok(n) if n.is_finite() => Ok(Literal::Number(n)),
                _ => {
                    self.pos = start;
                    Err(self.err("malformed number"))
                }
            },
            _ => {
                self.pos = start;
                Err(self.err("expected a literal"))
            }
        }
    }
}
