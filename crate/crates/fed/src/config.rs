//! Federation configuration file (TOML, camelCase keys).

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use aasfed_bpmn::{parse_bpmn, templates};
use aasfed_core::repository::valid_org_id;
use aasfed_core::snapshot::ObjectStoreRegistry;
use serde::{Deserialize, Serialize};

use crate::invokers::InvokerRegistry;
use crate::smc::ValidatorRegistry;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration at {path}: {reason}")]
    ConfigInvalid { path: String, reason: String },
}

impl ConfigError {
    fn at(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::ConfigInvalid {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn path(&self) -> &str {
        match self {
            ConfigError::ConfigInvalid { path, .. } => path,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BusSettings {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub initial_backoff_ms: u64,
    #[serde(default)]
    pub dead_letter_log: Option<PathBuf>,
}

fn default_attempts() -> u32 {
    5
}

fn default_backoff() -> u64 {
    50
}

impl Default for BusSettings {
    fn default() -> Self {
        BusSettings {
            max_attempts: default_attempts(),
            initial_backoff_ms: default_backoff(),
            dead_letter_log: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BridgeSettings {
    #[serde(default = "default_interval")]
    pub sync_interval_ms: u64,
    #[serde(default = "default_debounce")]
    pub debounce_ms: u64,
}

fn default_interval() -> u64 {
    1000
}

fn default_debounce() -> u64 {
    500
}

impl Default for BridgeSettings {
    fn default() -> Self {
        BridgeSettings {
            sync_interval_ms: default_interval(),
            debounce_ms: default_debounce(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct OrganizationConfig {
    pub org_id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    #[serde(default)]
    pub internal_listen: Option<String>,
    #[serde(default)]
    pub external_listen: Option<String>,
    #[serde(default)]
    pub internal_base_url: Option<String>,
    #[serde(default)]
    pub external_base_url: Option<String>,
    #[serde(default)]
    pub external_registry: bool,
    #[serde(default = "default_backend")]
    pub store_backend: String,
    #[serde(default)]
    pub seed: u64,
    /// Template files; the bundled templates when absent.
    #[serde(default)]
    pub templates: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub validators: Vec<String>,
    /// Bearer token → user. When non-empty the internal listener requires a token.
    #[serde(default)]
    pub tokens: BTreeMap<String, String>,
    /// Token the workflow engine presents on service calls.
    #[serde(default)]
    pub service_token: Option<String>,
    /// User → groups.
    #[serde(default)]
    pub users: BTreeMap<String, BTreeSet<String>>,
    /// Start a clone-approval instance for foreign shells; defaults to `externalRegistry`.
    #[serde(default)]
    pub clone_approval: Option<bool>,
    /// Organization that receives this organization's service requests.
    #[serde(default)]
    pub service_provider: Option<String>,
}

fn default_backend() -> String {
    "memory".into()
}

impl OrganizationConfig {
    pub fn new(org_id: &str) -> Self {
        OrganizationConfig {
            org_id: org_id.into(),
            display_name: None,
            internal_listen: None,
            external_listen: None,
            internal_base_url: None,
            external_base_url: None,
            external_registry: false,
            store_backend: default_backend(),
            seed: 0,
            templates: None,
            validators: Vec::new(),
            tokens: BTreeMap::new(),
            service_token: None,
            users: BTreeMap::new(),
            clone_approval: None,
            service_provider: None,
        }
    }

    pub fn internal_url(&self) -> String {
        base_url(&self.internal_base_url, &self.internal_listen, &self.org_id, "internal")
    }

    pub fn external_url(&self) -> String {
        base_url(&self.external_base_url, &self.external_listen, &self.org_id, "external")
    }

    pub fn clone_approval_enabled(&self) -> bool {
        self.clone_approval.unwrap_or(self.external_registry)
    }
}

fn base_url(explicit: &Option<String>, listen: &Option<String>, org: &str, side: &str) -> String {
    match (explicit, listen) {
        (Some(u), _) => u.trim_end_matches('/').to_string(),
        (None, Some(l)) if !l.ends_with(":0") => format!("http://{l}"),
        _ => format!("http://{org}.{side}"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FederationConfig {
    /// Root for repository logs, snapshot objects and engine journals; in-memory when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_invoker")]
    pub invoker: String,
    #[serde(default = "default_tick")]
    pub timer_tick_ms: u64,
    #[serde(default)]
    pub bus: BusSettings,
    #[serde(default)]
    pub bridge: BridgeSettings,
    pub organizations: Vec<OrganizationConfig>,
}

fn default_invoker() -> String {
    "in-process".into()
}

fn default_tick() -> u64 {
    1000
}

/// A template file read and parsed during validation.
#[derive(Debug, Clone)]
pub struct TemplateSource {
    pub origin: String,
    pub xml: String,
}

impl FederationConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: FederationConfig =
            toml::from_str(text).map_err(|e| ConfigError::at("<document>", e.message().to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at("<file>", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = self.data_dir.as_mut() {
            join(d);
        }
        if let Some(d) = self.bus.dead_letter_log.as_mut() {
            join(d);
        }
        for org in &mut self.organizations {
            for t in org.templates.iter_mut().flatten() {
                join(t);
            }
        }
    }

    /// Two organizations mirroring the copy-on-write example: `org-o` owns
    /// the asset and provides service, `org-oprime` clones and requests.
    pub fn demo() -> Self {
        let mut o = OrganizationConfig::new("org-o");
        o.display_name = Some("Organization O".into());
        o.seed = 1;
        o.validators = vec!["service-request-smc".into()];
        o.users.insert("carol".into(), ["service-technicians".to_string()].into());
        o.users.insert("olga".into(), ["plant-engineers".to_string()].into());
        let mut p = OrganizationConfig::new("org-oprime");
        p.display_name = Some("Organization O'".into());
        p.seed = 2;
        p.external_registry = true;
        p.validators = vec!["service-request-smc".into()];
        p.service_provider = Some("org-o".into());
        p.users.insert("alice".into(), ["plant-engineers".to_string()].into());
        p.users.insert("bob".into(), ["process-engineers".to_string()].into());
        FederationConfig {
            data_dir: None,
            invoker: default_invoker(),
            timer_tick_ms: default_tick(),
            bus: BusSettings::default(),
            bridge: BridgeSettings::default(),
            organizations: vec![o, p],
        }
    }

    pub fn organization(&self, org_id: &str) -> Option<&OrganizationConfig> {
        self.organizations.iter().find(|o| o.org_id == org_id)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.organizations.is_empty() {
            return Err(ConfigError::at("organizations", "at least one organization is required"));
        }
        if !InvokerRegistry::default().names().contains(&self.invoker.as_str()) {
            return Err(ConfigError::at("invoker", format!("unknown invoker {:?}", self.invoker)));
        }
        if self.timer_tick_ms == 0 {
            return Err(ConfigError::at("timerTickMs", "must be positive"));
        }
        if self.bridge.sync_interval_ms == 0 {
            return Err(ConfigError::at("bridge.syncIntervalMs", "must be positive"));
        }
        if self.bus.max_attempts == 0 {
            return Err(ConfigError::at("bus.maxAttempts", "must be positive"));
        }
        let backends = ObjectStoreRegistry::default();
        let validators = ValidatorRegistry::default();
        let ids: Vec<&str> = self.organizations.iter().map(|o| o.org_id.as_str()).collect();
        let mut seen = BTreeSet::new();
        let mut listeners = BTreeSet::new();
        for (i, org) in self.organizations.iter().enumerate() {
            let at = |field: &str| format!("organizations[{i}].{field}");
            if !valid_org_id(&org.org_id) {
                return Err(ConfigError::at(at("orgId"), "must match [a-z0-9-]+"));
            }
            if !seen.insert(org.org_id.as_str()) {
                return Err(ConfigError::at(at("orgId"), format!("duplicate organization {}", org.org_id)));
            }
            for (field, listen) in [("internalListen", &org.internal_listen), ("externalListen", &org.external_listen)] {
                if let Some(l) = listen {
                    let addr: SocketAddr = l
                        .parse()
                        .map_err(|_| ConfigError::at(at(field), format!("{l:?} is not a socket address")))?;
                    if addr.port() != 0 && !listeners.insert(addr) {
                        return Err(ConfigError::at(at(field), format!("{l} is already used")));
                    }
                }
            }
            for (field, url) in [("internalBaseUrl", &org.internal_base_url), ("externalBaseUrl", &org.external_base_url)] {
                if let Some(u) = url {
                    url::Url::parse(u).map_err(|e| ConfigError::at(at(field), e.to_string()))?;
                }
            }
            if !backends.names().contains(&org.store_backend.as_str()) {
                return Err(ConfigError::at(
                    at("storeBackend"),
                    format!("unknown backend {:?}; known: {:?}", org.store_backend, backends.names()),
                ));
            }
            if org.store_backend != "memory" && self.data_dir.is_none() {
                return Err(ConfigError::at(at("storeBackend"), "needs dataDir"));
            }
            for (j, v) in org.validators.iter().enumerate() {
                if !validators.names().contains(&v.as_str()) {
                    return Err(ConfigError::at(at(&format!("validators[{j}]")), format!("unknown validator {v:?}")));
                }
            }
            if let Some(p) = &org.service_provider {
                if p == &org.org_id || !ids.contains(&p.as_str()) {
                    return Err(ConfigError::at(at("serviceProvider"), format!("{p:?} is not another organization")));
                }
            }
            for (user, groups) in &org.users {
                if user.is_empty() || groups.iter().any(|g| g.is_empty()) {
                    return Err(ConfigError::at(at("users"), "empty user or group name"));
                }
            }
            for (token, user) in &org.tokens {
                if token.is_empty() || !org.users.contains_key(user) {
                    return Err(ConfigError::at(at("tokens"), format!("token for unknown user {user:?}")));
                }
            }
            self.templates_of(i)?;
        }
        Ok(())
    }

    /// Reads and parses the templates of organization `index`.
    pub fn templates_of(&self, index: usize) -> Result<Vec<TemplateSource>, ConfigError> {
        let org = &self.organizations[index];
        let Some(files) = &org.templates else {
            return Ok(templates::bundled()
                .into_iter()
                .map(|(name, xml)| TemplateSource {
                    origin: format!("bundled:{name}"),
                    xml: xml.to_string(),
                })
                .collect());
        };
        let mut out = Vec::new();
        for (j, file) in files.iter().enumerate() {
            let at = format!("organizations[{index}].templates[{j}]");
            let xml = std::fs::read_to_string(file).map_err(|e| ConfigError::at(&at, format!("{}: {e}", file.display())))?;
            parse_bpmn(xml.as_bytes()).map_err(|e| ConfigError::at(&at, e.to_string()))?;
            out.push(TemplateSource {
                origin: file.display().to_string(),
                xml,
            });
        }
        Ok(out)
    }
}
