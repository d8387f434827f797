//! Blocking HTTP client used by the command line against a running federation.

use std::io::Read;

use serde_json::Value;

use crate::config::FederationConfig;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("unknown organization {0}")]
    UnknownOrg(String),
    #[error("{url}: {message}")]
    Transport { url: String, message: String },
    #[error("{status} {kind}: {message}")]
    Api { status: u16, kind: String, message: String },
}

pub struct Client {
    config: FederationConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(config: FederationConfig, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Client { config, token, agent }
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    fn base(&self, org: &str, external: bool) -> Result<String, ClientError> {
        let o = self
            .config
            .organization(org)
            .ok_or_else(|| ClientError::UnknownOrg(org.to_string()))?;
        Ok(if external { o.external_url() } else { o.internal_url() })
    }

    pub fn request(&self, org: &str, external: bool, method: &str, path: &str, body: Option<&Value>) -> Result<Value, ClientError> {
        let url = format!("{}{path}", self.base(org, external)?);
        let transport = |message: String| ClientError::Transport {
            url: url.clone(),
            message,
        };
        let mut builder = ureq::http::Request::builder()
            .method(method)
            .uri(&url)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            builder = builder.header("Authorization", format!("Bearer {t}"));
        }
        let payload = body.map(|b| b.to_string()).unwrap_or_default();
        let req = builder.body(payload).map_err(|e| transport(e.to_string()))?;
        let mut resp = self.agent.run(req).map_err(|e| transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let mut text = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut text)
            .map_err(|e| transport(e.to_string()))?;
        let value: Value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        if (200..300).contains(&status) {
            Ok(value)
        } else {
            Err(ClientError::Api {
                status,
                kind: value["error"].as_str().unwrap_or("Error").to_string(),
                message: value["message"].as_str().unwrap_or_default().to_string(),
            })
        }
    }
}
