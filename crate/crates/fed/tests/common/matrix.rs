//! Every route, exercised once per role against a freshly built federation.

use std::sync::Arc;

use aasfed::api::{ApiRequest, Caller};
use aasfed::demo::publish;
use aasfed::Runtime;
use aasfed_core::model::{canonical_json, Digest, Entity, Shell, Submodel, SubmodelElement, ValueType};
use aasfed_core::repository::Role;
use aasfed_bpmn::engine::InstanceFilter;
use aasfed_core::clock::ManualClock;
use serde_json::{json, Value};

use super::*;

pub struct Fixture {
    pub rt: Arc<Runtime>,
    pub clock: Arc<ManualClock>,
    pub clone_id: String,
    pub first: String,
    pub second: String,
    pub instance: String,
    pub task: String,
}

pub const SPARE: &str = "urn:org-oprime:aas:spare";
pub const DOC: &str = "urn:org-oprime:sm:doc";

/// A cloned shell, a local shell and submodel with an attachment, two
/// commits with the second promoted, and an open service-request task.
pub fn fixture() -> Fixture {
    let (rt, clock) = runtime();
    publish_source(&rt);
    let task = tasks(&rt, P, "plant-engineers")[0]["taskId"].as_str().unwrap().to_string();
    let inst = complete(&rt, P, "alice", &task, json!({"decision": "approve"})).json();
    let clone_id = inst["variables"]["cloneId"].as_str().unwrap().to_string();

    let p = Caller::internal(P);
    let mut doc = Submodel::new(id(DOC), "Documentation");
    doc.elements.push(SubmodelElement::property("x", ValueType::Integer, "1"));
    doc.elements.push(SubmodelElement::attachment("manual", "text/plain"));
    ok(&rt, ApiRequest::new(p.clone(), "POST", "/submodels").json(&doc));
    ok(
        &rt,
        ApiRequest::new(p.clone(), "PUT", &format!("/submodels/{}/elements/manual/attachment", id(DOC).to_path()))
            .bytes(b"read me".to_vec(), "text/plain"),
    );
    let mut spare = Shell::new(id(SPARE), id("urn:asset:J"), "spare");
    spare.submodel_refs.push(id(DOC));
    ok(&rt, ApiRequest::new(p.clone(), "POST", "/shells").json(&spare));
    let first = commit(&rt, "first");
    ok(
        &rt,
        ApiRequest::new(p.clone(), "PATCH", &format!("/submodels/{}/elements/x/value", id(DOC).to_path())).json(&json!("2")),
    );
    let second = publish(&rt, P, "second").unwrap();
    add_request(&rt, "probe");
    let task = tasks(&rt, P, "process-engineers")[0]["taskId"].as_str().unwrap().to_string();
    let instance = rt
        .engine(P)
        .unwrap()
        .list_instances(&InstanceFilter::default())[0]
        .instance_id
        .clone();
    settle(&rt);
    rt.sync_bridges();
    Fixture { rt, clock, clone_id, first, second, instance, task }
}

pub fn commit(rt: &Runtime, message: &str) -> String {
    let c = ok(rt, ApiRequest::new(Caller::internal(P), "POST", "/snapshots").json(&json!({"message": message})));
    c["commitId"].as_str().unwrap().to_string()
}

/// One request template: verb, path and body, plus the status the internal
/// listener answers with.
pub struct Case {
    pub method: &'static str,
    pub path: String,
    pub body: Option<Body>,
    pub internal: u16,
}

pub enum Body {
    Json(Value),
    Raw(Vec<u8>, &'static str),
}

impl Case {
    pub fn request(&self, caller: Caller) -> ApiRequest {
        let req = ApiRequest::new(caller, self.method, &self.path);
        match &self.body {
            Some(Body::Json(v)) => req.json(v),
            Some(Body::Raw(b, ct)) => req.bytes(b.clone(), ct),
            None => req,
        }
    }

    pub fn label(&self) -> String {
        format!("{} {}", self.method, self.path)
    }

    /// Readable by external callers.
    pub fn shared(&self) -> bool {
        let first = self.path.trim_start_matches('/').split(['/', '?']).next().unwrap_or("");
        matches!(first, "shells" | "submodels" | "registry" | "discovery" | "assets")
    }

    /// Open on both listeners.
    pub fn open(&self) -> bool {
        matches!((self.method, self.path.as_str()), ("GET", "/healthz") | ("POST", "/events"))
    }
}

const TINY: &str = r#"<definitions xmlns="http://www.omg.org/spec/BPMN/20100524/MODEL"><process id="tiny"><startEvent id="s"/><endEvent id="e"/><sequenceFlow id="f" sourceRef="s" targetRef="e"/></process></definitions>"#;

fn case(method: &'static str, path: impl Into<String>, body: Option<Body>, internal: u16) -> Case {
    Case { method, path: path.into(), body, internal }
}

fn j(v: Value) -> Option<Body> {
    Some(Body::Json(v))
}

pub fn cases(f: &Fixture) -> Vec<Case> {
    let spare = id(SPARE).to_path();
    let doc = id(DOC).to_path();
    let clone = id(&f.clone_id).to_path();
    let s = id("urn:org-o:sm:S").to_path();
    let asset = id("urn:asset:I").to_path();
    let new_shell = Shell::new(id("urn:org-oprime:aas:new"), id("urn:asset:K"), "new");
    let mut spare_v2 = Shell::new(id(SPARE), id("urn:asset:J"), "spare2");
    spare_v2.submodel_refs.push(id(DOC));
    spare_v2.version = 1;
    let mut doc_v2 = f.rt.federation().repo(P).unwrap().get_submodel(Role::Internal, &id(DOC)).unwrap();
    doc_v2.id_short = "Docs".into();
    let new_sm = Submodel::new(id("urn:org-oprime:sm:new"), "New");
    let extra = Submodel::new(id("urn:org-oprime:sm:extra"), "Extra");
    let shell_desc = json!({"shellId": "urn:org-oprime:aas:ext", "assetId": "urn:asset:L", "orgId": P,
        "endpoint": "http://org-oprime.internal", "version": 1, "lastSyncedAt": "1970-01-01T00:00:00.000Z"});
    let sm_desc = json!({"submodelId": "urn:org-oprime:sm:ext", "orgId": P,
        "endpoint": "http://org-oprime.internal", "version": 1, "lastSyncedAt": "1970-01-01T00:00:00.000Z"});
    let clone_req = json!({"sourceOrgId": O, "sourceShellId": "urn:org-o:aas:A", "sourceVersion": 1,
        "targetOrgId": P, "requestedBy": "alice"});
    let signal = json!({"processKey": "probe", "instanceId": "i-1", "signal": "ping", "entityId": "urn:x:1"});
    let (a, b, iid, task) = (&f.first, &f.second, &f.instance, &f.task);
    vec![
        case("GET", "/healthz", None, 200),
        case("POST", "/events", j(signal), 202),
        case("GET", "/shells", None, 200),
        case("GET", "/shells?limit=1", None, 200),
        case("POST", "/shells", j(serde_json::to_value(&new_shell).unwrap()), 201),
        case("GET", format!("/shells/{spare}"), None, 200),
        case("PUT", format!("/shells/{spare}"), j(serde_json::to_value(&spare_v2).unwrap()), 200),
        case("DELETE", format!("/shells/{spare}"), None, 204),
        case("POST", format!("/shells/{clone}/submodels"), j(serde_json::to_value(&extra).unwrap()), 201),
        case("POST", format!("/shells/{clone}/submodels/{s}/copy"), None, 201),
        case("GET", "/submodels", None, 200),
        case("POST", "/submodels", j(serde_json::to_value(&new_sm).unwrap()), 201),
        case("GET", format!("/submodels/{doc}"), None, 200),
        case("PUT", format!("/submodels/{doc}"), j(serde_json::to_value(&doc_v2).unwrap()), 200),
        case("DELETE", format!("/submodels/{doc}"), None, 204),
        case("PATCH", format!("/submodels/{doc}/elements/x/value"), j(json!("3")), 200),
        case("PUT", format!("/submodels/{doc}/elements/manual/attachment"), Some(Body::Raw(b"v2".to_vec(), "text/plain")), 200),
        case("GET", format!("/submodels/{doc}/elements/manual/attachment"), None, 200),
        case("GET", "/registry/shell-descriptors", None, 200),
        case("GET", "/registry/shell-descriptors?kind=internal", None, 200),
        case("GET", "/registry/submodel-descriptors", None, 200),
        case("GET", format!("/registry/shell-descriptors/{spare}"), None, 200),
        case("POST", "/registry/shell-descriptors", j(shell_desc), 201),
        case("POST", "/registry/submodel-descriptors", j(sm_desc), 201),
        case("DELETE", format!("/registry/shell-descriptors/{spare}"), None, 204),
        case("GET", format!("/discovery/assets/{asset}/shells"), None, 200),
        case("GET", format!("/assets/{asset}/consolidated"), None, 200),
        case("POST", "/clone", j(clone_req), 200),
        case("GET", "/snapshots", None, 200),
        case("POST", "/snapshots", j(json!({"message": "probe"})), 201),
        case("GET", format!("/snapshots/{a}"), None, 200),
        case("GET", format!("/snapshots/{a}/diff/{b}"), None, 200),
        case("POST", format!("/snapshots/{a}/checkout"), None, 200),
        case("POST", format!("/snapshots/{a}/promote"), None, 200),
        case("GET", "/workflows", None, 200),
        case("POST", "/workflows/deploy", Some(Body::Raw(TINY.as_bytes().to_vec(), "application/xml")), 201),
        case("GET", "/workflows/instances", None, 200),
        case("GET", format!("/workflows/instances/{iid}"), None, 200),
        case("GET", format!("/workflows/instances/{iid}/audit"), None, 200),
        case("POST", "/workflows/clone-approval/start", j(json!({"aasId": "urn:x:1"})), 201),
        case("GET", "/tasks", None, 200),
        case("GET", format!("/tasks/{task}"), None, 200),
        case("POST", format!("/tasks/{task}/complete"), j(json!({"user": "bob", "values": {"initiate": false}})), 200),
        case("GET", "/me?user=bob", None, 200),
    ]
}

/// Digest over everything a request could change.
pub fn fingerprint(rt: &Runtime) -> Digest {
    let mut parts = Vec::new();
    for org in [O, P] {
        let node = rt.federation().org(org).unwrap();
        let (shells, submodels) = node.repo.live_state();
        for s in &shells {
            parts.push(json!(s.content_digest().unwrap().to_hex()));
        }
        for s in &submodels {
            parts.push(json!(s.content_digest().unwrap().to_hex()));
        }
        parts.push(serde_json::to_value(node.snapshots.list().unwrap()).unwrap());
        parts.push(json!(node.snapshots.stable().unwrap().map(|d| d.to_hex())));
        parts.push(serde_json::to_value(node.shell_registry.list().unwrap()).unwrap());
        parts.push(serde_json::to_value(node.submodel_registry.list().unwrap()).unwrap());
        if let Some(r) = &node.external_shell_registry {
            parts.push(serde_json::to_value(r.list().unwrap()).unwrap());
        }
        let engine = rt.engine(org).unwrap();
        parts.push(serde_json::to_value(engine.list_instances(&InstanceFilter::default())).unwrap());
        parts.push(serde_json::to_value(engine.templates().iter().map(|t| t.process_key.clone()).collect::<Vec<_>>()).unwrap());
    }
    Digest::of(&canonical_json(&Value::Array(parts)))
}
