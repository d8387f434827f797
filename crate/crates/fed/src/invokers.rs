//! Service invokers for workflow engines, selectable by name.

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::{Arc, Weak};

use aasfed_bpmn::invoker::{InvokeError, ServiceInvoker, ServiceRequest, ServiceResponse, IDEMPOTENCY_HEADER};

use crate::api::{Api, ApiRequest, Caller};

/// Base URLs of every listener in the federation.
#[derive(Debug, Clone, Default)]
pub struct Endpoints {
    listeners: Vec<(String, Caller)>,
}

impl Endpoints {
    pub fn add(&mut self, base_url: &str, caller: Caller) {
        self.listeners.push((base_url.trim_end_matches('/').to_string(), caller));
        self.listeners.sort_by_key(|l| std::cmp::Reverse(l.0.len()));
    }

    /// The listener a URL points at, and the path below it.
    pub fn resolve<'u>(&self, url: &'u str) -> Option<(&Caller, &'u str)> {
        self.listeners.iter().find_map(|(base, caller)| {
            let rest = url.strip_prefix(base.as_str())?;
            (rest.is_empty() || rest.starts_with('/') || rest.starts_with('?')).then_some((caller, rest))
        })
    }
}

/// What an invoker factory gets to work with.
#[derive(Clone)]
pub struct InvokerContext {
    pub org: String,
    pub api: Weak<Api>,
    pub endpoints: Arc<Endpoints>,
    pub token: Option<String>,
}

/// Dispatches service calls straight into the federation's [`Api`] when the
/// URL belongs to one of its listeners.
pub struct InProcessInvoker {
    ctx: InvokerContext,
}

impl ServiceInvoker for InProcessInvoker {
    fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, InvokeError> {
        let api = self.ctx.api.upgrade().ok_or("federation is shutting down")?;
        let (caller, path) = self
            .ctx
            .endpoints
            .resolve(&request.url)
            .ok_or_else(|| format!("no listener serves {}", request.url))?;
        if !api
            .federation()
            .org(&caller.org)
            .map(|n| n.is_reachable())
            .unwrap_or(false)
        {
            return Err(format!("{} unreachable", caller.org));
        }
        let path = if path.is_empty() { "/" } else { path };
        let mut req = ApiRequest::new(caller.clone(), &request.method, path)
            .idempotency_key(&request.idempotency_key);
        if let Some(b) = &request.body {
            req = req.bytes(b.clone().into_bytes(), "application/json");
        }
        let resp = api.handle(&req);
        Ok(ServiceResponse {
            status: resp.status,
            body: String::from_utf8_lossy(&resp.body_bytes()).into_owned(),
        })
    }
}

/// Plain HTTP client.
pub struct HttpInvoker {
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpInvoker {
    pub fn new(token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_secs(30)))
            .build()
            .into();
        HttpInvoker { agent, token }
    }
}

impl ServiceInvoker for HttpInvoker {
    fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, InvokeError> {
        let mut builder = ureq::http::Request::builder()
            .method(request.method.as_str())
            .uri(&request.url)
            .header(IDEMPOTENCY_HEADER, &request.idempotency_key)
            .header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            builder = builder.header("Authorization", format!("Bearer {t}"));
        }
        let http_req = builder
            .body(request.body.clone().unwrap_or_default())
            .map_err(|e| e.to_string())?;
        let mut resp = self.agent.run(http_req).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let mut body = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut body)
            .map_err(|e| e.to_string())?;
        Ok(ServiceResponse { status, body })
    }
}

pub type InvokerFactory = fn(&InvokerContext) -> Arc<dyn ServiceInvoker>;

pub struct InvokerRegistry {
    factories: BTreeMap<&'static str, InvokerFactory>,
}

impl Default for InvokerRegistry {
    fn default() -> Self {
        let mut r = InvokerRegistry {
            factories: BTreeMap::new(),
        };
        r.register("in-process", |ctx| Arc::new(InProcessInvoker { ctx: ctx.clone() }));
        r.register("http", |ctx| Arc::new(HttpInvoker::new(ctx.token.clone())));
        r
    }
}

impl InvokerRegistry {
    pub fn register(&mut self, name: &'static str, factory: InvokerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, ctx: &InvokerContext) -> Option<Arc<dyn ServiceInvoker>> {
        self.factories.get(name).map(|f| f(ctx))
    }
}
