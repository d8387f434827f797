//! Transport-independent REST API of one federation. The HTTP server, the
//! in-process service invoker and the tests all go through [`Api::handle`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use aasfed_bpmn::engine::{EngineError, InstanceFilter, InstanceState, TaskStatus, Variables};
use aasfed_bpmn::Engine;
use aasfed_core::bus::{topics, Action, BusError, Envelope};
use aasfed_core::clone::{CloneError, CloneRequest};
use aasfed_core::federation::{Federation, FederationError};
use aasfed_core::model::{canonical_json, Digest, Identifier, ModelError, Shell, Submodel};
use aasfed_core::registry::{RegistryError, ShellDescriptor, SubmodelDescriptor};
use aasfed_core::repository::{RepoError, Role, Verb};
use aasfed_core::snapshot::SnapshotError;
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const DEFAULT_PAGE: usize = 100;
const MAX_PAGE: usize = 1000;
const REPLY_CACHE: usize = 4096;

/// Who sent a request: the listener it arrived on and, when a bearer token
/// was presented, the user behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub org: String,
    pub role: Role,
    pub user: Option<String>,
}

impl Caller {
    pub fn internal(org: &str) -> Self {
        Caller {
            org: org.into(),
            role: Role::Internal,
            user: None,
        }
    }

    pub fn external(org: &str) -> Self {
        Caller {
            org: org.into(),
            role: Role::External,
            user: None,
        }
    }

    pub fn as_user(mut self, user: &str) -> Self {
        self.user = Some(user.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct ApiRequest {
    pub caller: Caller,
    pub method: String,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub content_type: Option<String>,
    pub idempotency_key: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(caller: Caller, method: &str, path_and_query: &str) -> Self {
        let (path, query) = match path_and_query.split_once('?') {
            Some((p, q)) => (p, url::form_urlencoded::parse(q.as_bytes()).into_owned().collect()),
            None => (path_and_query, Vec::new()),
        };
        ApiRequest {
            caller,
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            query,
            content_type: None,
            idempotency_key: None,
            body: Vec::new(),
        }
    }

    pub fn get(caller: Caller, path: &str) -> Self {
        Self::new(caller, "GET", path)
    }

    pub fn json(mut self, value: &impl Serialize) -> Self {
        self.body = serde_json::to_vec(value).expect("request bodies serialize");
        self.content_type = Some("application/json".into());
        self
    }

    pub fn bytes(mut self, body: Vec<u8>, content_type: &str) -> Self {
        self.body = body;
        self.content_type = Some(content_type.into());
        self
    }

    pub fn idempotency_key(mut self, key: &str) -> Self {
        self.idempotency_key = Some(key.into());
        self
    }

    fn param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Json(Value),
    Bytes { content_type: String, data: Vec<u8> },
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub payload: Payload,
}

impl ApiResponse {
    fn ok(value: impl Serialize) -> Self {
        Self::with_status(200, value)
    }

    fn with_status(status: u16, value: impl Serialize) -> Self {
        ApiResponse {
            status,
            payload: Payload::Json(serde_json::to_value(value).expect("response bodies serialize")),
        }
    }

    fn no_content() -> Self {
        ApiResponse {
            status: 204,
            payload: Payload::Empty,
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn json(&self) -> Value {
        match &self.payload {
            Payload::Json(v) => v.clone(),
            _ => Value::Null,
        }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, String> {
        serde_json::from_value(self.json()).map_err(|e| format!("unexpected response ({}): {e}", self.status))
    }

    pub fn content_type(&self) -> &str {
        match &self.payload {
            Payload::Json(_) => "application/json",
            Payload::Bytes { content_type, .. } => content_type,
            Payload::Empty => "text/plain",
        }
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        match &self.payload {
            Payload::Json(v) => canonical_json(v),
            Payload::Bytes { data, .. } => data.clone(),
            Payload::Empty => Vec::new(),
        }
    }

    /// The `error` kind of a failed response.
    pub fn error_kind(&self) -> Option<String> {
        self.json().get("error").and_then(Value::as_str).map(str::to_string)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub kind: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    fn new(status: u16, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            details: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "BadRequest", message)
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(404, "NotFound", what)
    }

    fn forbidden(role: Role, verb: Verb) -> Self {
        RepoError::Forbidden { role, verb }.into()
    }

    fn into_response(self) -> ApiResponse {
        let mut body = json!({"error": self.kind, "message": self.message});
        if let Some(d) = self.details {
            body["details"] = d;
        }
        ApiResponse {
            status: self.status,
            payload: Payload::Json(body),
        }
    }
}

impl From<RepoError> for ApiError {
    fn from(e: RepoError) -> Self {
        let message = e.to_string();
        let (status, kind) = match e {
            RepoError::Forbidden { .. } => (403, "Forbidden"),
            RepoError::NotFound(_) => (404, "NotFound"),
            RepoError::VersionConflict { .. } => (409, "VersionConflict"),
            RepoError::AlreadyExists(_) => (409, "AlreadyExists"),
            RepoError::PathNotFound(_) => (422, "PathNotFound"),
            RepoError::TypeMismatch(_) => (422, "TypeMismatch"),
            RepoError::Invalid(_) => (422, "InvalidEntity"),
            RepoError::Rejected { .. } => (422, "Rejected"),
            RepoError::DirtyCheckout => (409, "DirtyCheckout"),
            RepoError::Unreachable(_) => (503, "Unreachable"),
            RepoError::Storage(_) => (500, "Storage"),
        };
        ApiError::new(status, kind, message)
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MalformedEncoding(_) => ApiError::new(400, "MalformedEncoding", e.to_string()),
            other => ApiError::new(422, "InvalidEntity", other.to_string()),
        }
    }
}

impl From<SnapshotError> for ApiError {
    fn from(e: SnapshotError) -> Self {
        match e {
            SnapshotError::UnknownCommit(_) => ApiError::new(404, "UnknownCommit", e.to_string()),
            SnapshotError::Repo(r) => r.into(),
            other => ApiError::new(500, "Storage", other.to_string()),
        }
    }
}

impl From<FederationError> for ApiError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::UnknownOrg(_) | FederationError::DuplicateOrg(_) => ApiError::not_found(e.to_string()),
            FederationError::Repo(r) => r.into(),
            FederationError::Snapshot(s) => s.into(),
        }
    }
}

impl From<CloneError> for ApiError {
    fn from(e: CloneError) -> Self {
        let message = e.to_string();
        let (status, kind) = match e {
            CloneError::SourceUnreachable(_) => (502, "SourceUnreachable"),
            CloneError::SourceNotFound(_) => (404, "SourceNotFound"),
            CloneError::VersionGone { .. } => (410, "VersionGone"),
            CloneError::VersionNotPublished { .. } => (409, "VersionNotPublished"),
            CloneError::SelfClone(_) => (400, "SelfClone"),
            CloneError::NotARemoteReference(_) => (409, "NotARemoteReference"),
            CloneError::UnknownOrg(_) => (404, "NotFound"),
            CloneError::Repo(r) => return r.into(),
        };
        ApiError::new(status, kind, message)
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let message = e.to_string();
        match e {
            RegistryError::WrongOrganization { .. } => ApiError::new(422, "WrongOrganization", message),
            RegistryError::Unreachable(_) => ApiError::new(503, "Unreachable", message),
            RegistryError::NotFound(_) => ApiError::not_found(message),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::UnknownProcess(_) => ApiError::new(404, "UnknownProcess", message),
            EngineError::NotFound(_) => ApiError::not_found(message),
            EngineError::TaskNotOpen(_) => ApiError::new(409, "TaskNotOpen", message),
            EngineError::WrongGroup { .. } => ApiError::new(403, "WrongGroup", message),
            EngineError::FormValidation(fields) => ApiError {
                status: 422,
                kind: "FormValidation",
                message,
                details: serde_json::to_value(fields).ok(),
            },
            EngineError::Parse(p) => ApiError::new(400, "ParseError", p.to_string()),
            EngineError::InvalidVariable(_) => ApiError::bad_request(message),
            EngineError::Storage(_) => ApiError::new(500, "Storage", message),
        }
    }
}

impl From<BusError> for ApiError {
    fn from(e: BusError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

type ApiResult = Result<ApiResponse, ApiError>;

/// Signal posted to an external listener; republished on the bus under the
/// listener organization's workflow topic space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WorkflowSignal {
    pub process_key: String,
    pub instance_id: String,
    pub signal: String,
    pub entity_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_org: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CommitBody {
    #[serde(default)]
    tag: Option<String>,
    #[serde(default)]
    message: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CompleteBody {
    #[serde(default)]
    user: Option<String>,
    #[serde(default)]
    values: Variables,
}

#[derive(Default)]
struct ReplyCache {
    order: VecDeque<(String, String)>,
    replies: HashMap<(String, String), ApiResponse>,
}

pub struct Api {
    federation: Arc<Federation>,
    engines: RwLock<BTreeMap<String, Arc<Engine>>>,
    replies: Mutex<ReplyCache>,
}

fn decode_id(segment: &str) -> Result<Identifier, ApiError> {
    Ok(Identifier::from_path(segment)?)
}

fn parse_digest(segment: &str) -> Result<Digest, ApiError> {
    segment
        .parse()
        .map_err(|_| ApiError::new(404, "UnknownCommit", format!("unknown commit {segment}")))
}

fn body<T: DeserializeOwned>(req: &ApiRequest) -> Result<T, ApiError> {
    let bytes: &[u8] = if req.body.is_empty() { b"{}" } else { &req.body };
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn topic_level(name: &str, value: &str) -> Result<(), ApiError> {
    if value.is_empty() || value.contains(['/', '+', '#']) {
        return Err(ApiError::bad_request(format!("{name} must be a single topic level")));
    }
    Ok(())
}

fn page_args(req: &ApiRequest) -> Result<(Option<&str>, usize), ApiError> {
    let limit = match req.param("limit") {
        Some(l) => l
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=MAX_PAGE).contains(n))
            .ok_or_else(|| ApiError::bad_request(format!("limit must be within 1..={MAX_PAGE}")))?,
        None => DEFAULT_PAGE,
    };
    Ok((req.param("cursor"), limit))
}

/// The value of a property from a PATCH body: a JSON scalar, or raw text.
fn patch_value(req: &ApiRequest) -> Result<String, ApiError> {
    match serde_json::from_slice::<Value>(&req.body) {
        Ok(Value::String(s)) => Ok(s),
        Ok(Value::Number(n)) => Ok(n.to_string()),
        Ok(Value::Bool(b)) => Ok(b.to_string()),
        Ok(Value::Object(mut o)) if o.contains_key("value") => match o.remove("value") {
            Some(Value::String(s)) => Ok(s),
            Some(v @ (Value::Number(_) | Value::Bool(_))) => Ok(v.to_string()),
            _ => Err(ApiError::bad_request("value must be a scalar")),
        },
        Ok(_) => Err(ApiError::bad_request("value must be a scalar")),
        Err(_) => String::from_utf8(req.body.clone()).map_err(|_| ApiError::bad_request("value is not UTF-8")),
    }
}

impl Api {
    pub fn new(federation: Arc<Federation>) -> Self {
        Api {
            federation,
            engines: RwLock::new(BTreeMap::new()),
            replies: Mutex::new(ReplyCache::default()),
        }
    }

    pub fn federation(&self) -> &Arc<Federation> {
        &self.federation
    }

    pub fn add_engine(&self, org: &str, engine: Arc<Engine>) {
        self.engines.write().insert(org.to_string(), engine);
    }

    pub fn engine(&self, org: &str) -> Option<Arc<Engine>> {
        self.engines.read().get(org).cloned()
    }

    fn engine_for(&self, org: &str) -> Result<Arc<Engine>, ApiError> {
        self.engine(org)
            .ok_or_else(|| ApiError::new(503, "Unavailable", format!("no workflow engine for {org}")))
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        let cache_key = match (&req.idempotency_key, req.method.as_str()) {
            (Some(k), m) if m != "GET" => Some((format!("{}/{:?}", req.caller.org, req.caller.role), k.clone())),
            _ => None,
        };
        if let Some(key) = &cache_key {
            if let Some(hit) = self.replies.lock().replies.get(key) {
                return hit.clone();
            }
        }
        let response = match self.route(req) {
            Ok(r) => r,
            Err(e) => e.into_response(),
        };
        if let Some(key) = cache_key {
            if response.status < 500 {
                let mut cache = self.replies.lock();
                if cache.order.len() >= REPLY_CACHE {
                    if let Some(old) = cache.order.pop_front() {
                        cache.replies.remove(&old);
                    }
                }
                cache.order.push_back(key.clone());
                cache.replies.insert(key, response.clone());
            }
        }
        response
    }

    fn route(&self, req: &ApiRequest) -> ApiResult {
        let verb = Verb::parse(&req.method)
            .ok_or_else(|| ApiError::new(405, "MethodNotAllowed", format!("method {}", req.method)))?;
        let segs: Vec<&str> = req.path.split('/').filter(|s| !s.is_empty()).collect();
        let role = req.caller.role;
        let org = req.caller.org.as_str();
        self.federation.org(org)?;

        // Signals and health checks are open on both listeners.
        match (verb, segs.as_slice()) {
            (Verb::Get, ["healthz"]) => return Ok(self.health(org, role)),
            (Verb::Post, ["events"]) => return self.post_event(req),
            _ => {}
        }
        let shared = matches!(
            segs.first(),
            Some(&"shells") | Some(&"submodels") | Some(&"registry") | Some(&"discovery") | Some(&"assets")
        );
        if role == Role::External && (verb != Verb::Get || !shared) {
            return Err(ApiError::forbidden(role, verb));
        }

        let repo = self.federation.repo(org)?;
        match (verb, segs.as_slice()) {
            // ---- repository ----
            (Verb::Get, ["shells"]) => {
                let (cursor, limit) = page_args(req)?;
                Ok(ApiResponse::ok(repo.list_shells(role, cursor, limit)?))
            }
            (Verb::Post, ["shells"]) => Ok(ApiResponse::with_status(201, repo.create_shell(role, body::<Shell>(req)?)?)),
            (Verb::Get, ["shells", id]) => Ok(ApiResponse::ok(repo.get_shell(role, &decode_id(id)?)?)),
            (Verb::Put, ["shells", id]) => {
                let shell: Shell = body(req)?;
                if shell.id != decode_id(id)? {
                    return Err(ApiError::bad_request("body id does not match the path"));
                }
                Ok(ApiResponse::ok(repo.update_shell(role, shell)?))
            }
            (Verb::Delete, ["shells", id]) => {
                repo.delete_shell(role, &decode_id(id)?)?;
                Ok(ApiResponse::no_content())
            }
            (Verb::Post, ["shells", id, "submodels"]) => {
                let sm = self.federation.add_new_submodel(org, &decode_id(id)?, body::<Submodel>(req)?)?;
                Ok(ApiResponse::with_status(201, sm))
            }
            (Verb::Post, ["shells", id, "submodels", sm, "copy"]) => {
                let copy = self
                    .federation
                    .copy_on_write_submodel(org, &decode_id(id)?, &decode_id(sm)?)?;
                Ok(ApiResponse::with_status(201, copy))
            }
            (Verb::Get, ["submodels"]) => {
                let (cursor, limit) = page_args(req)?;
                Ok(ApiResponse::ok(repo.list_submodels(role, cursor, limit)?))
            }
            (Verb::Post, ["submodels"]) => Ok(ApiResponse::with_status(
                201,
                repo.create_submodel(role, body::<Submodel>(req)?)?,
            )),
            (Verb::Get, ["submodels", id]) => Ok(ApiResponse::ok(repo.get_submodel(role, &decode_id(id)?)?)),
            (Verb::Put, ["submodels", id]) => {
                let sm: Submodel = body(req)?;
                if sm.id != decode_id(id)? {
                    return Err(ApiError::bad_request("body id does not match the path"));
                }
                Ok(ApiResponse::ok(repo.update_submodel(role, sm)?))
            }
            (Verb::Delete, ["submodels", id]) => {
                repo.delete_submodel(role, &decode_id(id)?)?;
                Ok(ApiResponse::no_content())
            }
            (Verb::Patch, ["submodels", id, "elements", path, "value"]) => {
                let value = patch_value(req)?;
                Ok(ApiResponse::ok(repo.patch_property_value(role, &decode_id(id)?, path, &value)?))
            }
            (Verb::Put, ["submodels", id, "elements", path, "attachment"]) => {
                let ct = req.content_type.as_deref().unwrap_or("application/octet-stream");
                let digest = repo.put_file_attachment(role, &decode_id(id)?, path, &req.body, ct)?;
                Ok(ApiResponse::ok(json!({"digest": digest, "length": req.body.len()})))
            }
            (Verb::Get, ["submodels", id, "elements", path, "attachment"]) => {
                let (content_type, data) = repo.get_file_attachment(role, &decode_id(id)?, path)?;
                Ok(ApiResponse {
                    status: 200,
                    payload: Payload::Bytes {
                        content_type,
                        data: data.to_vec(),
                    },
                })
            }

            // ---- registry and discovery ----
            (Verb::Get, ["registry", "shell-descriptors"]) => {
                let node = self.federation.org(org)?;
                let registry = match self.registry_kind(req)? {
                    Role::External => node
                        .external_shell_registry
                        .clone()
                        .ok_or_else(|| ApiError::not_found(format!("{org} has no external registry")))?,
                    Role::Internal => node.shell_registry.clone(),
                };
                Ok(ApiResponse::ok(registry.list()?))
            }
            (Verb::Get, ["registry", "submodel-descriptors"]) => {
                let node = self.federation.org(org)?;
                let registry = match self.registry_kind(req)? {
                    Role::External => node
                        .external_submodel_registry
                        .clone()
                        .ok_or_else(|| ApiError::not_found(format!("{org} has no external registry")))?,
                    Role::Internal => node.submodel_registry.clone(),
                };
                Ok(ApiResponse::ok(registry.list()?))
            }
            (Verb::Get, ["registry", "shell-descriptors", id]) => {
                let node = self.federation.org(org)?;
                let id = decode_id(id)?;
                let found = match &node.external_shell_registry {
                    Some(ext) if role == Role::External => ext.get(&id)?,
                    _ => node.shell_registry.get(&id)?,
                };
                found
                    .map(ApiResponse::ok)
                    .ok_or_else(|| ApiError::not_found(id.to_string()))
            }
            (Verb::Post, ["registry", "shell-descriptors"]) => {
                let desc: ShellDescriptor = body(req)?;
                self.federation.org(org)?.shell_registry.register(desc.clone())?;
                Ok(ApiResponse::with_status(201, desc))
            }
            (Verb::Post, ["registry", "submodel-descriptors"]) => {
                let desc: SubmodelDescriptor = body(req)?;
                self.federation.org(org)?.submodel_registry.register(desc.clone())?;
                Ok(ApiResponse::with_status(201, desc))
            }
            (Verb::Delete, ["registry", "shell-descriptors", id]) => {
                let id = decode_id(id)?;
                if self.federation.org(org)?.shell_registry.unregister(&id)? {
                    Ok(ApiResponse::no_content())
                } else {
                    Err(ApiError::not_found(id.to_string()))
                }
            }
            (Verb::Get, ["discovery", "assets", asset, "shells"]) => {
                Ok(ApiResponse::ok(self.federation.discover(&decode_id(asset)?)))
            }
            (Verb::Get, ["assets", asset, "consolidated"]) => {
                Ok(ApiResponse::ok(self.federation.consolidated_view(&decode_id(asset)?)))
            }

            // ---- cloning and snapshots ----
            (Verb::Post, ["clone"]) => {
                let clone_req: CloneRequest = body(req)?;
                if clone_req.target_org_id != org {
                    return Err(ApiError::bad_request(format!(
                        "targetOrgId must be {org}, the organization of this listener"
                    )));
                }
                Ok(ApiResponse::ok(self.federation.clone_shell(&clone_req)?))
            }
            (Verb::Get, ["snapshots"]) => Ok(ApiResponse::ok(self.federation.org(org)?.snapshots.list()?)),
            (Verb::Post, ["snapshots"]) => {
                let b: CommitBody = body(req)?;
                Ok(ApiResponse::with_status(201, self.federation.snapshot_commit(org, b.tag, &b.message)?))
            }
            (Verb::Get, ["snapshots", id]) => {
                Ok(ApiResponse::ok(self.federation.org(org)?.snapshots.get(&parse_digest(id)?)?))
            }
            (Verb::Get, ["snapshots", a, "diff", b]) => Ok(ApiResponse::ok(self.federation.snapshot_diff(
                org,
                &parse_digest(a)?,
                &parse_digest(b)?,
            )?)),
            (Verb::Post, ["snapshots", id, "checkout"]) => {
                let changed = self.federation.snapshot_checkout(org, &parse_digest(id)?)?;
                Ok(ApiResponse::ok(json!({"commitId": id, "changed": changed})))
            }
            (Verb::Post, ["snapshots", id, "promote"]) => {
                self.federation.promote_to_stable(org, &parse_digest(id)?)?;
                Ok(ApiResponse::ok(json!({"commitId": id, "stable": true})))
            }

            // ---- workflows ----
            (Verb::Get, ["workflows"]) => {
                let engine = self.engine_for(org)?;
                let list: Vec<Value> = engine
                    .templates()
                    .iter()
                    .map(|t| serde_json::to_value(t.as_ref()).unwrap_or_default())
                    .collect();
                Ok(ApiResponse::ok(list))
            }
            (Verb::Post, ["workflows", "deploy"]) => {
                let t = self.engine_for(org)?.deploy(&req.body)?;
                Ok(ApiResponse::with_status(
                    201,
                    json!({"processKey": t.process_key, "version": t.version, "nodes": t.nodes.len(), "flows": t.flows.len()}),
                ))
            }
            (Verb::Get, ["workflows", "instances"]) => {
                let state = match req.param("state") {
                    Some(s) => Some(
                        serde_json::from_value::<InstanceState>(Value::String(s.to_string()))
                            .map_err(|_| ApiError::bad_request(format!("unknown state {s:?}")))?,
                    ),
                    None => None,
                };
                let filter = InstanceFilter {
                    process_key: req.param("processKey").map(str::to_string),
                    state,
                };
                Ok(ApiResponse::ok(self.engine_for(org)?.list_instances(&filter)))
            }
            (Verb::Get, ["workflows", "instances", id]) => Ok(ApiResponse::ok(self.engine_for(org)?.instance(id)?)),
            (Verb::Get, ["workflows", "instances", id, "audit"]) => {
                Ok(ApiResponse::ok(self.engine_for(org)?.audit_trail(id)?))
            }
            (Verb::Post, ["workflows", key, "start"]) => {
                let vars: Variables = body(req)?;
                Ok(ApiResponse::with_status(201, self.engine_for(org)?.start_instance(key, vars)?))
            }
            (Verb::Get, ["tasks"]) => self.list_tasks(req, org),
            (Verb::Get, ["tasks", id]) => Ok(ApiResponse::ok(self.engine_for(org)?.task(id)?)),
            (Verb::Post, ["tasks", id, "complete"]) => {
                let b: CompleteBody = body(req)?;
                let user = match (&req.caller.user, &b.user) {
                    (Some(c), Some(u)) if c != u => {
                        return Err(ApiError::new(403, "Forbidden", "user does not match the bearer token"));
                    }
                    (Some(c), _) => c.clone(),
                    (None, Some(u)) => u.clone(),
                    (None, None) => return Err(ApiError::bad_request("user is required")),
                };
                Ok(ApiResponse::ok(self.engine_for(org)?.complete_user_task(id, &user, b.values)?))
            }
            (Verb::Get, ["me"]) => {
                let user = req
                    .caller
                    .user
                    .clone()
                    .or_else(|| req.param("user").map(str::to_string))
                    .ok_or_else(|| ApiError::bad_request("user is required"))?;
                let groups = self.engine_for(org)?.directory().groups_of(&user);
                Ok(ApiResponse::ok(json!({"user": user, "orgId": org, "groups": groups})))
            }
            _ => Err(ApiError::not_found(format!("no route for {} {}", req.method, req.path))),
        }
    }

    fn registry_kind(&self, req: &ApiRequest) -> Result<Role, ApiError> {
        match req.param("kind") {
            None => Ok(req.caller.role),
            Some("internal") => Ok(Role::Internal),
            Some("external") => Ok(Role::External),
            Some(k) => Err(ApiError::bad_request(format!("unknown registry kind {k:?}"))),
        }
    }

    fn health(&self, org: &str, role: Role) -> ApiResponse {
        let node = self.federation.org(org).ok();
        ApiResponse::ok(json!({
            "status": "ok",
            "orgId": org,
            "role": role,
            "reachable": node.map(|n| n.is_reachable()).unwrap_or(false),
            "engine": self.engine(org).is_some(),
        }))
    }

    fn list_tasks(&self, req: &ApiRequest, org: &str) -> ApiResult {
        let engine = self.engine_for(org)?;
        let status = req.param("status").unwrap_or("open");
        let mut tasks = match req.param("instanceId") {
            Some(iid) => engine.tasks_of(iid),
            None if status == "open" => engine.list_open_tasks(req.param("group")),
            None => engine
                .list_instances(&InstanceFilter::default())
                .iter()
                .flat_map(|i| engine.tasks_of(&i.instance_id))
                .collect(),
        };
        if status != "all" {
            let wanted: TaskStatus = serde_json::from_value(Value::String(status.to_string()))
                .map_err(|_| ApiError::bad_request(format!("unknown status {status:?}")))?;
            tasks.retain(|t| t.status == wanted);
        }
        if let Some(g) = req.param("group") {
            tasks.retain(|t| t.candidate_group == g);
        } else if let Some(user) = &req.caller.user {
            let groups = engine.directory().groups_of(user);
            tasks.retain(|t| groups.contains(&t.candidate_group));
        }
        Ok(ApiResponse::ok(tasks))
    }

    fn post_event(&self, req: &ApiRequest) -> ApiResult {
        let signal: WorkflowSignal = body(req)?;
        topic_level("processKey", &signal.process_key)?;
        topic_level("instanceId", &signal.instance_id)?;
        topic_level("signal", &signal.signal)?;
        let org = &req.caller.org;
        let topic = topics::workflow(org, &signal.process_key, &signal.instance_id, &signal.signal);
        let from = signal.from_org.clone().unwrap_or_else(|| org.clone());
        let mut envelope = Envelope::new(&from, "workflow", &signal.entity_id, 0, Action::WorkflowSignal);
        if let Some(b) = signal.body {
            envelope = envelope.with_body(b);
        }
        let event = self
            .federation
            .bus()
            .publish(&format!("events/{org}"), &topic, envelope)?;
        Ok(ApiResponse::with_status(
            202,
            json!({"topic": event.topic, "eventId": event.envelope.event_id}),
        ))
    }
}
