mod common;

use aasfed::api::{ApiRequest, Caller};
use aasfed_bpmn::audit::AuditEvent;
use aasfed_core::bus::{topics, Action, Envelope};
use aasfed_core::model::Shell;
use common::*;
use serde_json::json;

fn clone_calls(rt: &aasfed::Runtime) -> usize {
    rt.engine(P)
        .unwrap()
        .audit_log()
        .iter()
        .filter(|r| matches!(&r.event, AuditEvent::ServiceCall { request, .. } if request.url.ends_with("/clone")))
        .count()
}

fn oprime_shells(rt: &aasfed::Runtime) -> Vec<Shell> {
    rt.federation().repo(P).unwrap().live_state().0
}

#[test]
fn foreign_shell_opens_one_approval_at_the_other_org_only() {
    let (rt, _) = runtime();
    publish_source(&rt);
    assert_eq!(instances(&rt, P, "clone-approval").len(), 1);
    assert!(instances(&rt, O, "clone-approval").is_empty());
    let t = tasks(&rt, P, "plant-engineers");
    assert_eq!(t.len(), 1);
    assert_eq!(t[0]["name"], "Approve cloning form");
}

#[test]
fn approval_clones_once() {
    let (rt, _) = runtime();
    let (a, _) = publish_source(&rt);
    let task = tasks(&rt, P, "plant-engineers")[0]["taskId"].as_str().unwrap().to_string();
    let r = complete(&rt, P, "alice", &task, json!({"decision": "approve"}));
    assert!(r.is_success(), "{}", r.json());
    let inst = r.json();
    assert_eq!(inst["state"], "completed");
    assert_eq!(clone_calls(&rt), 1);
    let shells = oprime_shells(&rt);
    assert_eq!(shells.len(), 1);
    assert_eq!(shells[0].id.as_str(), inst["variables"]["cloneId"].as_str().unwrap());
    assert_eq!(shells[0].asset_id, a.asset_id);
    assert!(shells[0].id.as_str().starts_with("urn:org-oprime:clone:"));
}

#[test]
fn rejection_makes_no_calls() {
    let (rt, _) = runtime();
    publish_source(&rt);
    let task = tasks(&rt, P, "plant-engineers")[0]["taskId"].as_str().unwrap().to_string();
    let r = complete(&rt, P, "alice", &task, json!({"decision": "reject", "comment": "not ours"}));
    assert_eq!(r.json()["state"], "terminated");
    assert_eq!(clone_calls(&rt), 0);
    assert!(oprime_shells(&rt).is_empty());
}

#[test]
fn wrong_group_cannot_approve() {
    let (rt, _) = runtime();
    publish_source(&rt);
    let task = tasks(&rt, P, "plant-engineers")[0]["taskId"].as_str().unwrap().to_string();
    let r = complete(&rt, P, "bob", &task, json!({"decision": "approve"}));
    assert_eq!(r.status, 403);
    let r = complete(&rt, P, "alice", &task, json!({"decision": "maybe"}));
    assert_eq!(r.status, 422);
    assert_eq!(r.error_kind().as_deref(), Some("FormValidation"));
}

#[test]
fn redelivered_trigger_is_ignored() {
    let (rt, _) = runtime();
    let (a, _) = publish_source(&rt);
    let body = serde_json::to_value(&a).unwrap();
    let mut env = Envelope::new(O, "shell", a.id.as_str(), a.version, Action::Created).with_body(body);
    env.event_id = uuid::Uuid::from_u128(0x5eed);
    for _ in 0..3 {
        rt.federation()
            .bus()
            .publish("aas-repo/org-o", &topics::shell(O, &a.id, Action::Created), env.clone())
            .unwrap();
    }
    settle(&rt);
    assert_eq!(instances(&rt, P, "clone-approval").len(), 1);
}

#[test]
fn updates_do_not_ask_again() {
    let (rt, _) = runtime();
    let (mut a, _) = publish_source(&rt);
    a.id_short = "A2".into();
    ok(&rt, ApiRequest::new(Caller::internal(O), "PUT", &format!("/shells/{}", a.id.to_path())).json(&a));
    settle(&rt);
    // Only created events trigger approval.
    assert_eq!(instances(&rt, P, "clone-approval").len(), 1);
}

#[test]
fn service_request_is_acknowledged() {
    let (rt, _) = runtime();
    add_request(&rt, "leak");
    assert_eq!(request_status(&rt, "leak"), "draft");
    confirm(&rt, "leak", true);
    assert_eq!(request_status(&rt, "leak"), "submitted");
    let receipt = tasks(&rt, O, "service-technicians");
    assert_eq!(receipt.len(), 1);
    let r = complete(&rt, O, "carol", receipt[0]["taskId"].as_str().unwrap(), json!({}));
    assert!(r.is_success(), "{}", r.json());
    settle(&rt);
    assert_eq!(request_status(&rt, "leak"), "acknowledged");
    let inst = &instances(&rt, P, "service-request")[0];
    assert_eq!(inst["state"], "completed");
}

#[test]
fn unanswered_request_expires_on_the_hour() {
    let (rt, clock) = runtime();
    let tick = rt.config().timer_tick_ms as i64;
    add_request(&rt, "noise");
    confirm(&rt, "noise", true);
    clock.advance(HOUR_MS - tick);
    rt.tick();
    settle(&rt);
    assert_eq!(request_status(&rt, "noise"), "submitted");
    clock.advance(tick);
    rt.tick();
    settle(&rt);
    assert_eq!(request_status(&rt, "noise"), "expired");
    assert_eq!(instances(&rt, P, "service-request")[0]["state"], "expired");
    // A late acknowledgment changes nothing.
    let receipt = tasks(&rt, O, "service-technicians");
    complete(&rt, O, "carol", receipt[0]["taskId"].as_str().unwrap(), json!({}));
    settle(&rt);
    assert_eq!(request_status(&rt, "noise"), "expired");
}

#[test]
fn declined_request_stays_draft() {
    let (rt, clock) = runtime();
    add_request(&rt, "drip");
    confirm(&rt, "drip", false);
    assert_eq!(request_status(&rt, "drip"), "draft");
    assert_eq!(instances(&rt, P, "service-request")[0]["state"], "terminated");
    assert!(tasks(&rt, O, "service-technicians").is_empty());
    clock.advance(2 * HOUR_MS);
    rt.tick();
    settle(&rt);
    assert_eq!(request_status(&rt, "drip"), "draft");
}

#[test]
fn each_draft_request_starts_one_workflow() {
    let (rt, _) = runtime();
    add_request(&rt, "one");
    add_request(&rt, "two");
    let insts = instances(&rt, P, "service-request");
    assert_eq!(insts.len(), 2);
    let mut ids: Vec<_> = insts.iter().map(|i| i["variables"]["requestId"].as_str().unwrap().to_string()).collect();
    ids.sort();
    assert_eq!(ids, [format!("{REQUESTS}#one"), format!("{REQUESTS}#two")]);
}

#[test]
fn invalid_status_transition_is_rejected() {
    let (rt, _) = runtime();
    add_request(&rt, "leak");
    let r = send(
        &rt,
        ApiRequest::new(Caller::internal(P), "PATCH", &format!("/submodels/{}/elements/leak.status/value", id(REQUESTS).to_path()))
            .json(&json!("acknowledged")),
    );
    assert_eq!(r.status, 422, "{}", r.json());
}

#[test]
fn demos_run() {
    let demos = aasfed::demo::DemoRegistry::default();
    let names: Vec<_> = demos.list().map(|d| d.name()).collect();
    assert_eq!(names, ["clone", "service-request"]);
    for d in demos.list() {
        let mut out = Vec::new();
        d.run(&mut out).unwrap_or_else(|e| panic!("{}: {e}", d.name()));
        assert!(!out.is_empty());
    }
}
