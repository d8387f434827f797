#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use aasfed::api::{ApiRequest, ApiResponse, Caller};
use aasfed::demo::{call, demo_runtime, publish};
use aasfed::smc::{find_requests, ServiceRequestSmc};
use aasfed::Runtime;
use aasfed_core::clock::ManualClock;
use aasfed_core::model::{Identifier, Shell, Submodel, SubmodelElement, ValueType};
use aasfed_core::repository::Role;
use serde_json::{json, Value};

pub const O: &str = "org-o";
pub const P: &str = "org-oprime";
pub const HOUR_MS: i64 = 3_600_000;

pub fn id(s: &str) -> Identifier {
    Identifier::new(s).unwrap()
}

pub fn runtime() -> (Arc<Runtime>, Arc<ManualClock>) {
    demo_runtime().unwrap()
}

pub fn settle(rt: &Runtime) {
    assert!(rt.wait_idle(Duration::from_secs(10)), "bus did not settle");
}

pub fn send(rt: &Runtime, req: ApiRequest) -> ApiResponse {
    rt.api().handle(&req)
}

pub fn ok(rt: &Runtime, req: ApiRequest) -> Value {
    call(rt, req).unwrap()
}

/// Source shell A (asset I) with submodel S holding property P, published at org-o.
pub fn publish_source(rt: &Runtime) -> (Shell, Submodel) {
    let o = Caller::internal(O);
    let mut s = Submodel::new(id("urn:org-o:sm:S"), "Operation");
    s.elements.push(SubmodelElement::property("P", ValueType::Double, "20.0"));
    let mut a = Shell::new(id("urn:org-o:aas:A"), id("urn:asset:I"), "A");
    a.submodel_refs.push(s.id.clone());
    ok(rt, ApiRequest::new(o.clone(), "POST", "/submodels").json(&s));
    let a: Shell = serde_json::from_value(ok(rt, ApiRequest::new(o, "POST", "/shells").json(&a))).unwrap();
    publish(rt, O, "release").unwrap();
    settle(rt);
    (a, s)
}

pub fn tasks(rt: &Runtime, org: &str, group: &str) -> Vec<Value> {
    let v = ok(rt, ApiRequest::get(Caller::internal(org), &format!("/tasks?group={group}")));
    v.as_array().cloned().unwrap_or_default()
}

pub fn complete(rt: &Runtime, org: &str, user: &str, task: &str, values: Value) -> ApiResponse {
    send(
        rt,
        ApiRequest::new(Caller::internal(org).as_user(user), "POST", &format!("/tasks/{task}/complete"))
            .json(&json!({ "values": values })),
    )
}

pub fn instances(rt: &Runtime, org: &str, key: &str) -> Vec<Value> {
    let v = ok(rt, ApiRequest::get(Caller::internal(org), &format!("/workflows/instances?processKey={key}")));
    v.as_array().cloned().unwrap_or_default()
}

pub const REQUESTS: &str = "urn:org-oprime:sm:service";

/// Adds a draft request to org-oprime's service submodel, creating it on first use.
pub fn add_request(rt: &Runtime, name: &str) {
    let p = Caller::internal(P);
    let sm_id = id(REQUESTS);
    let smc = ServiceRequestSmc::draft(name, P, "fault", "repair").to_element();
    let repo = rt.federation().repo(P).unwrap();
    match repo.get_submodel(Role::Internal, &sm_id) {
        Ok(mut sm) => {
            sm.elements.push(smc);
            ok(rt, ApiRequest::new(p, "PUT", &format!("/submodels/{}", sm_id.to_path())).json(&sm));
        }
        Err(_) => {
            let mut sm = Submodel::new(sm_id, "Service");
            sm.elements.push(smc);
            ok(rt, ApiRequest::new(p, "POST", "/submodels").json(&sm));
        }
    }
    settle(rt);
}

pub fn request_status(rt: &Runtime, name: &str) -> String {
    let sm = rt
        .federation()
        .repo(P)
        .unwrap()
        .get_submodel(Role::Internal, &id(REQUESTS))
        .unwrap();
    find_requests(&sm).remove(name).unwrap().unwrap().status.to_string()
}

/// Completes the requester's confirmation task for `name`.
pub fn confirm(rt: &Runtime, name: &str, initiate: bool) {
    let rid = format!("{REQUESTS}#{name}");
    let task = tasks(rt, P, "process-engineers")
        .into_iter()
        .find(|t| {
            let inst = ok(rt, ApiRequest::get(Caller::internal(P), &format!("/workflows/instances/{}", t["instanceId"].as_str().unwrap())));
            inst["variables"]["requestId"] == json!(rid)
        })
        .expect("confirmation task");
    let r = complete(rt, P, "bob", task["taskId"].as_str().unwrap(), json!({ "initiate": initiate }));
    assert!(r.is_success(), "{}", r.json());
    settle(rt);
}

pub mod matrix;

pub fn value_of(sm: &Submodel, path: &str) -> Option<String> {
    match sm.element(path)? {
        SubmodelElement::Property { value, .. } => Some(value.clone()),
        _ => None,
    }
}
