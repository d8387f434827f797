use std::sync::Arc;

use aasfed_bpmn::audit::{AuditEvent, AuditRecord};
use aasfed_bpmn::engine::{
    replay, Directory, EngineConfig, EngineError, InstanceState, TaskStatus, Variables,
};
use aasfed_bpmn::invoker::{RecordingInvoker, ReplayInvoker, ServiceInvoker, ServiceRequest, ServiceResponse};
use aasfed_bpmn::{templates, Engine};
use aasfed_core::bus::{Action, Envelope};
use aasfed_core::clock::{Clock, ManualClock, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const T0: i64 = 1_700_000_000_000;
const HOUR: i64 = 3_600_000;

fn vars(v: Value) -> Variables {
    v.as_object().unwrap().clone()
}

fn config(seed: u64) -> EngineConfig {
    let mut c = EngineConfig::new("org-oprime", seed);
    c.context = vars(json!({
        "selfOrg": "org-oprime",
        "selfInternal": "http://org-oprime.internal",
        "selfExternal": "http://org-oprime.external",
    }));
    c.directory = Directory::default()
        .with("alice", &["plant-engineers"])
        .with("bob", &["process-engineers"])
        .with("carol", &["service-technicians"]);
    c
}

fn ok_invoker() -> Arc<dyn ServiceInvoker> {
    Arc::new(|r: &ServiceRequest| {
        Ok(ServiceResponse {
            status: 200,
            body: if r.url.ends_with("/clone") {
                r#"{"id":"urn:org-oprime:clone:1","version":1}"#.into()
            } else {
                "{}".into()
            },
        })
    })
}

struct Fixture {
    engine: Engine,
    clock: Arc<ManualClock>,
    calls: Arc<RecordingInvoker>,
}

fn fixture_with(seed: u64, inner: Arc<dyn ServiceInvoker>, cfg: EngineConfig) -> Fixture {
    let clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
    let calls = Arc::new(RecordingInvoker::new(inner));
    let engine = Engine::new(cfg, clock.clone(), calls.clone()).unwrap();
    for (_, xml) in templates::bundled() {
        engine.deploy(xml.as_bytes()).unwrap();
    }
    let _ = seed;
    Fixture { engine, clock, calls }
}

fn fixture(seed: u64) -> Fixture {
    fixture_with(seed, ok_invoker(), config(seed))
}

fn clone_vars() -> Variables {
    vars(json!({"aasId": "urn:org-o:aas:A", "assetId": "urn:asset:I", "sourceOrg": "org-o", "sourceVersion": 1}))
}

fn open_task(engine: &Engine, instance_id: &str) -> String {
    engine
        .tasks_of(instance_id)
        .into_iter()
        .find(|t| t.status == TaskStatus::Open)
        .expect("an open task")
        .task_id
}

fn count(trail: &[AuditRecord], pred: impl Fn(&AuditEvent) -> bool) -> usize {
    trail.iter().filter(|r| pred(&r.event)).count()
}

#[test]
fn approve_calls_clone_once_and_completes() {
    let f = fixture(1);
    let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
    assert_eq!(inst.current_node_id.as_deref(), Some("approve"));
    assert_eq!(f.engine.list_open_tasks(Some("plant-engineers")).len(), 1);
    let task = open_task(&f.engine, &inst.instance_id);
    let done = f
        .engine
        .complete_user_task(&task, "alice", vars(json!({"decision": "approve"})))
        .unwrap();
    assert_eq!(done.state, InstanceState::Completed);
    assert_eq!(done.variables["cloneId"], json!("urn:org-oprime:clone:1"));
    let calls = f.calls.calls();
    assert_eq!(calls.len(), 1);
    assert_eq!(calls[0].request.url, "http://org-oprime.internal/clone");
    assert_eq!(calls[0].request.idempotency_key, format!("{}:cloneShell:1", inst.instance_id));
    let body: Value = serde_json::from_str(calls[0].request.body.as_deref().unwrap()).unwrap();
    assert_eq!(
        body,
        json!({"sourceOrgId": "org-o", "sourceShellId": "urn:org-o:aas:A", "sourceVersion": 1,
               "targetOrgId": "org-oprime", "requestedBy": "alice", "mode": "shell-only"})
    );
    let trail = f.engine.audit_trail(&inst.instance_id).unwrap();
    assert_eq!(count(&trail, |e| matches!(e, AuditEvent::ServiceCall { .. })), 1);
    assert!(matches!(trail.last().unwrap().event, AuditEvent::InstanceEnded { .. }));
}

#[test]
fn reject_terminates_without_calls() {
    let f = fixture(2);
    let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
    let task = open_task(&f.engine, &inst.instance_id);
    let done = f
        .engine
        .complete_user_task(&task, "alice", vars(json!({"decision": "reject"})))
        .unwrap();
    assert_eq!(done.state, InstanceState::Terminated);
    assert!(f.calls.calls().is_empty());
}

/// The clone call happens iff the recorded decision is 'approve', over every
/// form input shape.
#[test]
fn clone_safety_over_all_form_inputs() {
    let inputs = [
        json!({"decision": "approve"}),
        json!({"decision": "reject"}),
        json!({"decision": "approve", "comment": "ok"}),
        json!({"decision": "reject", "comment": ""}),
        json!({}),
        json!({"decision": "maybe"}),
        json!({"decision": true}),
        json!({"decision": null}),
        json!({"comment": "x"}),
        json!({"decision": "approve", "extra": 1}),
    ];
    for (i, values) in inputs.iter().enumerate() {
        let f = fixture(100 + i as u64);
        let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
        let task = open_task(&f.engine, &inst.instance_id);
        let outcome = f.engine.complete_user_task(&task, "alice", vars(values.clone()));
        let recorded = f.engine.task(&task).unwrap().submitted_values;
        let approved = recorded.as_ref().and_then(|v| v.get("decision")) == Some(&json!("approve"));
        assert_eq!(f.calls.calls().len(), usize::from(approved), "{values}");
        if outcome.is_err() {
            assert!(matches!(outcome, Err(EngineError::FormValidation(_))));
            assert_eq!(f.engine.task(&task).unwrap().status, TaskStatus::Open);
        }
    }
}

#[test]
fn task_guards() {
    let f = fixture(3);
    let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
    let task = open_task(&f.engine, &inst.instance_id);
    assert!(matches!(
        f.engine.complete_user_task(&task, "bob", vars(json!({"decision": "approve"}))),
        Err(EngineError::WrongGroup { .. })
    ));
    match f.engine.complete_user_task(&task, "alice", vars(json!({}))) {
        Err(EngineError::FormValidation(errs)) => assert_eq!(errs[0].field, "decision"),
        other => panic!("{other:?}"),
    }
    assert!(f.engine.list_open_tasks(Some("process-engineers")).is_empty());
    f.engine
        .complete_user_task(&task, "alice", vars(json!({"decision": "reject"})))
        .unwrap();
    assert!(matches!(
        f.engine.complete_user_task(&task, "alice", vars(json!({"decision": "reject"}))),
        Err(EngineError::TaskNotOpen(_))
    ));
    assert!(matches!(f.engine.audit_trail("nope"), Err(EngineError::NotFound(_))));
    assert!(matches!(
        f.engine.start_instance("nope", Variables::new()),
        Err(EngineError::UnknownProcess(_))
    ));
}

const TRIVIAL: &str = r#"<definitions xmlns="http://www.omg.org/spec/BPMN/20100524/MODEL"><process id="trivial">
<startEvent id="s"/><endEvent id="e"/><sequenceFlow id="f" sourceRef="s" targetRef="e"/></process></definitions>"#;

const FLAGGED: &str = r#"<definitions xmlns="http://www.omg.org/spec/BPMN/20100524/MODEL"><process id="flagged">
<startEvent id="s"/><exclusiveGateway id="g" default="no"/><endEvent id="e"/>
<sequenceFlow id="f" sourceRef="s" targetRef="g"/>
<sequenceFlow id="yes" sourceRef="g" targetRef="e"><conditionExpression>flag</conditionExpression></sequenceFlow>
<sequenceFlow id="no" sourceRef="g" targetRef="e"/></process></definitions>"#;

#[test]
fn start_to_end_completes_immediately_and_redeploy_keeps_version() {
    let f = fixture(4);
    let t1 = f.engine.deploy(TRIVIAL.as_bytes()).unwrap();
    let t2 = f.engine.deploy(TRIVIAL.as_bytes()).unwrap();
    assert_eq!((t1.version, t2.version), (1, 1));
    let t3 = f.engine.deploy(TRIVIAL.replace("id=\"e\"", "id=\"end\"").replace("targetRef=\"e\"", "targetRef=\"end\"").as_bytes()).unwrap();
    assert_eq!(t3.version, 2);
    let inst = f.engine.start_instance("trivial", Variables::new()).unwrap();
    assert_eq!(inst.state, InstanceState::Completed);
}

#[test]
fn missing_variable_is_false_and_audited() {
    let f = fixture(5);
    f.engine.deploy(FLAGGED.as_bytes()).unwrap();
    let inst = f.engine.start_instance("flagged", Variables::new()).unwrap();
    let trail = f.engine.audit_trail(&inst.instance_id).unwrap();
    assert_eq!(count(&trail, |e| matches!(e, AuditEvent::ConditionWarning { flow_id, .. } if flow_id == "yes")), 1);
    assert_eq!(
        count(&trail, |e| matches!(e, AuditEvent::FlowTaken { flow_id, condition_result: None } if flow_id == "no")),
        1
    );
    let inst = f.engine.start_instance("flagged", vars(json!({"flag": true}))).unwrap();
    let trail = f.engine.audit_trail(&inst.instance_id).unwrap();
    assert_eq!(count(&trail, |e| matches!(e, AuditEvent::FlowTaken { condition_result: Some(true), .. })), 1);
}

fn request_vars(request_id: &str) -> Variables {
    vars(json!({
        "requestId": request_id,
        "providerExternal": "http://org-o.external",
        "smPath": "dXJuOnNt",
        "statusPath": "ServiceRequest.status",
        "faultDescription": "pump \"P-101\" leaking",
        "requestedServiceType": "repair",
    }))
}

fn ack(request_id: &str) -> (String, Envelope) {
    let env = Envelope::new("org-o", "workflow", request_id, 0, Action::WorkflowSignal);
    ("workflow/org-oprime/service-receipt/p-1/acknowledged".into(), env)
}

fn submitted(f: &Fixture, request_id: &str) -> String {
    let inst = f.engine.start_instance("service-request", request_vars(request_id)).unwrap();
    let task = open_task(&f.engine, &inst.instance_id);
    let inst = f
        .engine
        .complete_user_task(&task, "bob", vars(json!({"initiate": "true"})))
        .unwrap();
    assert_eq!(inst.current_node_id.as_deref(), Some("waitAck"));
    inst.instance_id
}

fn patched_statuses(f: &Fixture) -> Vec<String> {
    f.calls
        .calls()
        .iter()
        .filter(|c| c.request.method == "PATCH")
        .map(|c| serde_json::from_str::<String>(c.request.body.as_deref().unwrap()).unwrap())
        .collect()
}

#[test]
fn service_request_acknowledged() {
    let f = fixture(6);
    let iid = submitted(&f, "req-1");
    let emitted = &f.calls.calls()[0].request;
    assert_eq!(emitted.url, "http://org-o.external/events");
    let body: Value = serde_json::from_str(emitted.body.as_deref().unwrap()).unwrap();
    assert_eq!(body["body"]["faultDescription"], json!("pump \"P-101\" leaking"));

    let (topic, wrong) = ack("req-other");
    assert!(f.engine.deliver_message(&topic, &wrong).is_empty());
    let (topic, env) = ack("req-1");
    assert_eq!(f.engine.deliver_message(&topic, &env), vec![iid.clone()]);
    assert!(f.engine.deliver_message(&topic, &env).is_empty(), "redelivery is ignored");
    assert_eq!(f.engine.instance(&iid).unwrap().state, InstanceState::Completed);
    assert_eq!(patched_statuses(&f), vec!["submitted", "acknowledged"]);
    // The acknowledgment disarmed the timeout.
    assert!(f.engine.fire_timers(Timestamp::from_millis(T0 + 10 * HOUR)).is_empty());
}

#[test]
fn service_request_expires_on_the_due_tick() {
    let f = fixture(7);
    let iid = submitted(&f, "req-2");
    let due = f.engine.next_timer_due().unwrap();
    assert_eq!(due, Timestamp::from_millis(T0 + HOUR));
    assert!(f.engine.fire_timers(due.plus_millis(-1)).is_empty());
    assert_eq!(f.engine.fire_timers(due), vec![iid.clone()]);
    assert_eq!(f.engine.instance(&iid).unwrap().state, InstanceState::Expired);
    assert_eq!(patched_statuses(&f), vec!["submitted", "expired"]);
    let (topic, env) = ack("req-2");
    assert!(f.engine.deliver_message(&topic, &env).is_empty());
}

#[test]
fn service_request_declined_leaves_status_alone() {
    let f = fixture(8);
    let inst = f.engine.start_instance("service-request", request_vars("req-3")).unwrap();
    let task = open_task(&f.engine, &inst.instance_id);
    let inst = f
        .engine
        .complete_user_task(&task, "bob", vars(json!({"initiate": false})))
        .unwrap();
    assert_eq!(inst.state, InstanceState::Terminated);
    assert!(f.calls.calls().is_empty());
}

#[test]
fn message_start_creates_receipt_instance() {
    let f = fixture(9);
    let env = Envelope::new("org-o", "workflow", "req-9", 0, Action::WorkflowSignal).with_body(json!({
        "requestId": "req-9", "replyTo": "http://org-o.external/events", "nested": {"ignored": true}
    }));
    let started = f.engine.deliver_message("workflow/org-oprime/service-request/x/submitted", &env);
    assert_eq!(started.len(), 1);
    let inst = f.engine.instance(&started[0]).unwrap();
    assert_eq!(inst.process_key, "service-receipt");
    assert!(!inst.variables.contains_key("nested"));
    let task = open_task(&f.engine, &inst.instance_id);
    f.engine.complete_user_task(&task, "carol", Variables::new()).unwrap();
    let call = &f.calls.calls()[0].request;
    assert_eq!(call.url, "http://org-o.external/events");
    // Another org's topic space does not start anything.
    let other = Envelope::new("org-o", "workflow", "req-10", 0, Action::WorkflowSignal);
    assert!(f.engine.deliver_message("workflow/org-x/service-request/x/submitted", &other).is_empty());
}

#[test]
fn transient_failure_is_retried_once_with_the_same_key() {
    let attempts = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let a = attempts.clone();
    let flaky: Arc<dyn ServiceInvoker> = Arc::new(move |_: &ServiceRequest| {
        let n = a.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(ServiceResponse {
            status: if n == 0 { 503 } else { 200 },
            body: "{}".into(),
        })
    });
    let f = fixture_with(10, flaky, config(10));
    let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
    let task = open_task(&f.engine, &inst.instance_id);
    let done = f
        .engine
        .complete_user_task(&task, "alice", vars(json!({"decision": "approve"})))
        .unwrap();
    assert_eq!(done.state, InstanceState::Completed);
    let calls = f.calls.calls();
    assert_eq!(calls.len(), 2);
    assert_eq!(calls[0].request.idempotency_key, calls[1].request.idempotency_key);

    let down: Arc<dyn ServiceInvoker> = Arc::new(|_: &ServiceRequest| Err("connection refused".to_string()));
    let f = fixture_with(11, down, config(11));
    let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
    let task = open_task(&f.engine, &inst.instance_id);
    let done = f
        .engine
        .complete_user_task(&task, "alice", vars(json!({"decision": "approve"})))
        .unwrap();
    assert_eq!(done.state, InstanceState::Terminated);
    assert_eq!(f.calls.calls().len(), 2);
}

#[test]
fn reopened_engine_resumes_at_rest_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(12);
    cfg.data_dir = Some(dir.path().to_path_buf());
    let (iid, task) = {
        let f = fixture_with(12, ok_invoker(), cfg.clone());
        let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
        (inst.instance_id.clone(), open_task(&f.engine, &inst.instance_id))
    };
    let f = fixture_with(12, ok_invoker(), cfg);
    assert_eq!(f.engine.task(&task).unwrap().status, TaskStatus::Open);
    f.engine
        .complete_user_task(&task, "alice", vars(json!({"decision": "approve"})))
        .unwrap();
    assert_eq!(f.engine.instance(&iid).unwrap().state, InstanceState::Completed);
    let seqs: Vec<u64> = f.engine.audit_log().iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    // A fresh instance after reopening does not reuse an id.
    let other = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
    assert_ne!(other.instance_id, iid);
}

#[test]
fn crash_during_service_call_is_retried_on_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(13);
    cfg.data_dir = Some(dir.path().to_path_buf());
    let crashing: Arc<dyn ServiceInvoker> = Arc::new(|_: &ServiceRequest| -> Result<ServiceResponse, String> {
        panic!("process killed mid-call")
    });
    let (iid, task) = {
        let f = fixture_with(13, crashing, cfg.clone());
        let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
        let task = open_task(&f.engine, &inst.instance_id);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            f.engine
                .complete_user_task(&task, "alice", vars(json!({"decision": "approve"})))
        }));
        assert!(r.is_err());
        (inst.instance_id, task)
    };
    let clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
    let calls = Arc::new(RecordingInvoker::new(ok_invoker()));
    let engine = Engine::new(cfg, clock, calls.clone()).unwrap();
    assert_eq!(engine.instance(&iid).unwrap().state, InstanceState::Completed);
    let c = calls.calls();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].request.idempotency_key, format!("{iid}:cloneShell:1"));
    assert_eq!(engine.task(&task).unwrap().status, TaskStatus::Completed);
}

fn strip(audit: &[AuditRecord]) -> Vec<(String, AuditEvent)> {
    audit.iter().map(|r| (r.instance_id.clone(), r.event.clone())).collect()
}

fn random_responder(seed: u64) -> Arc<dyn ServiceInvoker> {
    let rng = parking_lot::Mutex::new(ChaCha8Rng::seed_from_u64(seed));
    Arc::new(move |_: &ServiceRequest| {
        let roll: u8 = rng.lock().gen_range(0..10);
        match roll {
            0 => Err("timeout".to_string()),
            1 => Ok(ServiceResponse { status: 503, body: String::new() }),
            _ => Ok(ServiceResponse { status: 200, body: r#"{"id":"urn:x:clone:9"}"#.into() }),
        }
    })
}

/// One random run touching both bundled templates.
fn random_run(f: &Fixture, rng: &mut ChaCha8Rng) {
    for _ in 0..rng.gen_range(1..4) {
        let inst = f.engine.start_instance("clone-approval", clone_vars()).unwrap();
        if rng.gen_bool(0.8) {
            let task = open_task(&f.engine, &inst.instance_id);
            let d = if rng.gen_bool(0.5) { "approve" } else { "reject" };
            let _ = f.engine.complete_user_task(&task, "alice", vars(json!({"decision": d})));
        }
    }
    for n in 0..rng.gen_range(1..4) {
        let rid = format!("req-{n}");
        let inst = f.engine.start_instance("service-request", request_vars(&rid)).unwrap();
        let task = open_task(&f.engine, &inst.instance_id);
        let _ = f
            .engine
            .complete_user_task(&task, "bob", vars(json!({"initiate": rng.gen_bool(0.7)})));
        f.clock.advance(rng.gen_range(0..2 * HOUR));
        match rng.gen_range(0..3) {
            0 => {
                let (topic, env) = ack(&rid);
                f.engine.deliver_message(&topic, &env);
            }
            1 => {
                f.engine.fire_timers(f.clock.now());
            }
            _ => {}
        }
    }
    f.clock.advance(2 * HOUR);
    f.engine.fire_timers(f.clock.now());
}

#[test]
fn replaying_inputs_reproduces_the_audit() {
    for run in 0..50u64 {
        let f = fixture_with(run, random_responder(run), config(run));
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + run);
        random_run(&f, &mut rng);

        let clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
        let replayed = Engine::new(config(run), clock.clone(), Arc::new(ReplayInvoker::new(f.calls.calls()))).unwrap();
        for (_, xml) in templates::bundled() {
            replayed.deploy(xml.as_bytes()).unwrap();
        }
        replay(&replayed, &clock, &f.engine.inputs()).unwrap();
        assert_eq!(strip(&replayed.audit_log()), strip(&f.engine.audit_log()), "run {run}");
    }
}
