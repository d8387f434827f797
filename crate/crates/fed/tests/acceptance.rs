//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Pinned tolerances:
//! - copy-on-write: 100 sequences of 1..=25 operations over 3 remote submodels
//! - bridges: 64 federations of 1..=5 orgs, shell indices 0..50, converged after 2 passes
//! - determinism: 50 runs, audit compared with timestamps removed
//! - timers: tick = `timerTickMs`; not fired one tick early, fired on the due tick
//! - topics: 10,000 pairs

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use aasfed::api::{ApiRequest, Caller};
use aasfed::demo::publish;
use aasfed_bpmn::audit::{AuditEvent, AuditRecord};
use aasfed_bpmn::engine::{replay, Directory, EngineConfig, TaskStatus, Variables};
use aasfed_bpmn::invoker::{RecordingInvoker, ReplayInvoker, ServiceInvoker, ServiceRequest, ServiceResponse};
use aasfed_bpmn::{parse_bpmn, templates, Engine, ParseError};
use aasfed_core::bus::{match_topic, Action, BusConfig, Envelope, EventBus, TopicFilter};
use aasfed_core::clock::{Clock, ManualClock, Timestamp};
use aasfed_core::clone::{ConsolidatedAssetView, ContributedSubmodel, Contribution};
use aasfed_core::federation::{Federation, OrgSpec};
use aasfed_core::model::{canonical_json, Digest, Entity, Identifier, Shell, Submodel, SubmodelElement, ValueType};
use aasfed_core::repository::{Role, Verb};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn digests(rt: &aasfed::Runtime, org: &str) -> BTreeMap<String, Digest> {
    let (shells, submodels) = rt.federation().repo(org).unwrap().live_state();
    let mut out = BTreeMap::new();
    for s in shells {
        out.insert(s.id.to_string(), s.content_digest().unwrap());
    }
    for s in submodels {
        out.insert(s.id.to_string(), s.content_digest().unwrap());
    }
    out
}

fn approve_clone(rt: &aasfed::Runtime) -> String {
    let task = tasks(rt, P, "plant-engineers")[0]["taskId"].as_str().unwrap().to_string();
    let r = complete(rt, P, "alice", &task, json!({"decision": "approve"}));
    assert!(r.is_success(), "{}", r.json());
    r.json()["variables"]["cloneId"].as_str().unwrap().to_string()
}

fn clone_modify_extend() -> Check {
    let (rt, _) = runtime();
    let (a, s) = publish_source(&rt);
    let before = digests(&rt, O);
    let clone_id = approve_clone(&rt);
    let p = Caller::internal(P);
    ok(
        &rt,
        ApiRequest::new(p.clone(), "PATCH", &format!("/submodels/{}/elements/P/value", s.id.to_path())).json(&json!("21.5")),
    );
    let s2 = Submodel::new(id("urn:org-oprime:sm:S2"), "Maintenance");
    ok(&rt, ApiRequest::new(p.clone(), "POST", &format!("/shells/{}/submodels", id(&clone_id).to_path())).json(&s2));
    publish(&rt, P, "release clone").unwrap();
    settle(&rt);
    rt.sync_bridges();

    ensure(digests(&rt, O) == before, || "source organization changed".into())?;
    let clone: Shell = serde_json::from_value(ok(&rt, ApiRequest::get(p, &format!("/shells/{}", id(&clone_id).to_path())))).unwrap();
    ensure(clone.asset_id == a.asset_id, || format!("clone asset {} != {}", clone.asset_id, a.asset_id))?;
    let s_prime = clone.submodel_refs[0].clone();
    let view: ConsolidatedAssetView = serde_json::from_value(ok(
        &rt,
        ApiRequest::get(Caller::external(P), &format!("/assets/{}/consolidated", a.asset_id.to_path())),
    ))
    .unwrap();
    let expected = ConsolidatedAssetView {
        asset_id: a.asset_id.clone(),
        contributions: vec![
            Contribution {
                org_id: O.into(),
                shell_id: a.id.clone(),
                submodels: vec![ContributedSubmodel { submodel_id: s.id.clone(), shadows: None }],
            },
            Contribution {
                org_id: P.into(),
                shell_id: clone.id.clone(),
                submodels: vec![
                    ContributedSubmodel { submodel_id: s_prime.clone(), shadows: Some(s.id.clone()) },
                    ContributedSubmodel { submodel_id: s2.id.clone(), shadows: None },
                ],
            },
        ],
        partial: false,
    };
    ensure(view == expected, || format!("view {view:?}"))?;
    Ok(format!("S' = {s_prime}"))
}

#[derive(Debug, Clone)]
enum CowOp {
    PatchOriginal(usize, i64),
    PatchCurrent(usize, i64),
    CopyEndpoint(usize),
    AddNew(usize),
    RenameClone(u32),
}

fn cow_op(rng: &mut ChaCha8Rng) -> CowOp {
    match rng.gen_range(0..5) {
        0 => CowOp::PatchOriginal(rng.gen_range(0..3), rng.gen_range(0..100)),
        1 => CowOp::PatchCurrent(rng.gen_range(0..3), rng.gen_range(0..100)),
        2 => CowOp::CopyEndpoint(rng.gen_range(0..3)),
        3 => CowOp::AddNew(rng.gen_range(0..1000)),
        _ => CowOp::RenameClone(rng.gen_range(0..1000)),
    }
}

fn copy_on_write() -> Check {
    let mut copies_seen = 0;
    for seq in 0..100u64 {
        let (rt, _) = runtime();
        let o = Caller::internal(O);
        let p = Caller::internal(P);
        let sources: Vec<Identifier> = (0..3).map(|i| id(&format!("urn:org-o:sm:S{i}"))).collect();
        let mut shell = Shell::new(id("urn:org-o:aas:A"), id("urn:asset:I"), "A");
        for sid in &sources {
            let mut sm = Submodel::new(sid.clone(), "Data");
            sm.elements.push(SubmodelElement::property("P", ValueType::Integer, "0"));
            ok(&rt, ApiRequest::new(o.clone(), "POST", "/submodels").json(&sm));
            shell.submodel_refs.push(sid.clone());
        }
        ok(&rt, ApiRequest::new(o.clone(), "POST", "/shells").json(&shell));
        publish(&rt, O, "release").unwrap();
        settle(&rt);
        let before = digests(&rt, O);
        let clone_id = id(&approve_clone(&rt));

        let mut rng = ChaCha8Rng::seed_from_u64(seq);
        let mut written = BTreeSet::new();
        let ops: Vec<CowOp> = (0..rng.gen_range(1..=25)).map(|_| cow_op(&mut rng)).collect();
        for op in &ops {
            let current: Shell = serde_json::from_value(ok(&rt, ApiRequest::get(p.clone(), &format!("/shells/{}", clone_id.to_path())))).unwrap();
            match op {
                CowOp::PatchOriginal(i, v) => {
                    let r = send(
                        &rt,
                        ApiRequest::new(p.clone(), "PATCH", &format!("/submodels/{}/elements/P/value", sources[*i].to_path())).json(&json!(v)),
                    );
                    // The original id only resolves until the first copy exists.
                    ensure(r.is_success() != written.contains(i), || format!("seq {seq}: {op:?} -> {}", r.status))?;
                    written.insert(*i);
                }
                CowOp::PatchCurrent(i, v) => {
                    let target = &current.submodel_refs[*i];
                    let r = send(
                        &rt,
                        ApiRequest::new(p.clone(), "PATCH", &format!("/submodels/{}/elements/P/value", target.to_path())).json(&json!(v)),
                    );
                    ensure(r.is_success(), || format!("seq {seq}: {op:?} -> {}", r.status))?;
                    written.insert(*i);
                }
                CowOp::CopyEndpoint(i) => {
                    let r = send(
                        &rt,
                        ApiRequest::new(
                            p.clone(),
                            "POST",
                            &format!("/shells/{}/submodels/{}/copy", clone_id.to_path(), sources[*i].to_path()),
                        ),
                    );
                    ensure(r.is_success() != written.contains(i), || format!("seq {seq}: {op:?} -> {}", r.status))?;
                    written.insert(*i);
                }
                CowOp::AddNew(n) => {
                    let sm = Submodel::new(id(&format!("urn:org-oprime:sm:new{n}")), "New");
                    send(&rt, ApiRequest::new(p.clone(), "POST", &format!("/shells/{}/submodels", clone_id.to_path())).json(&sm));
                }
                CowOp::RenameClone(n) => {
                    let mut s = current.clone();
                    s.id_short = format!("A{n}");
                    ok(&rt, ApiRequest::new(p.clone(), "PUT", &format!("/shells/{}", clone_id.to_path())).json(&s));
                }
            }
            ensure(digests(&rt, O) == before, || format!("seq {seq}: {op:?} changed the source"))?;
        }
        let (_, submodels) = rt.federation().repo(P).unwrap().live_state();
        for (i, sid) in sources.iter().enumerate() {
            let copies = submodels
                .iter()
                .filter(|s| s.provenance.as_ref().map(|p| &p.source_id) == Some(sid))
                .count();
            let want = usize::from(written.contains(&i));
            ensure(copies == want, || format!("seq {seq}: {copies} copies of {sid}, want {want}"))?;
            copies_seen += copies;
        }
    }
    Ok(format!("100 sequences, {copies_seen} copies, source digests constant"))
}

fn bridge_convergence() -> Check {
    let mut max_passes = 0;
    for run in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(run);
        let n = rng.gen_range(1..=5);
        let names: Vec<String> = (0..n).map(|i| format!("org-{i}")).collect();
        let clock = Arc::new(ManualClock::new(Timestamp::from_millis(1_000)));
        let bus = EventBus::new(BusConfig::default(), clock.clone());
        let specs = names.iter().map(|o| OrgSpec::in_memory(o, true)).collect();
        let fed = Federation::build(specs, bus, clock.clone()).unwrap();
        for _ in 0..rng.gen_range(1..8) {
            for _ in 0..rng.gen_range(0..40) {
                let org = &names[rng.gen_range(0..n)];
                let repo = fed.repo(org).unwrap();
                let sid = id(&format!("urn:{org}:aas:{}", rng.gen_range(0..50)));
                match (rng.gen_range(0..10), repo.get_shell(Role::Internal, &sid)) {
                    (0..=1, Ok(_)) => {
                        repo.delete_shell(Role::Internal, &sid).unwrap();
                    }
                    (_, Ok(mut s)) => {
                        s.asset_id = id(&format!("urn:asset:{}", rng.gen_range(0..10)));
                        repo.update_shell(Role::Internal, s).unwrap();
                    }
                    (_, Err(_)) => {
                        let s = Shell::new(sid, id(&format!("urn:asset:{}", rng.gen_range(0..10))), "s");
                        repo.create_shell(Role::Internal, s).unwrap();
                    }
                }
            }
            let down = names.choose(&mut rng).unwrap();
            let outage = rng.gen_bool(0.3);
            if outage {
                fed.set_reachable(down, false).unwrap();
            }
            clock.advance(1_000);
            fed.sync_bridges_once();
            if outage {
                fed.set_reachable(down, true).unwrap();
            }
        }
        fed.bus().wait_idle(std::time::Duration::from_secs(5));

        let oracle: BTreeMap<String, (String, String, u64)> = names
            .iter()
            .flat_map(|o| fed.repo(o).unwrap().live_state().0.into_iter().map(move |s| (s, o.clone())))
            .map(|(s, o)| (s.id.to_string(), (s.asset_id.to_string(), o, s.version)))
            .collect();
        let externals = fed.external_shell_registries();
        let view = |r: &aasfed_core::registry::ShellRegistry| -> BTreeMap<String, (String, String, u64)> {
            r.list()
                .unwrap()
                .into_iter()
                .map(|d| (d.shell_id.to_string(), (d.asset_id.to_string(), d.org_id, d.version)))
                .collect()
        };
        let mut passes = 0;
        while passes < 2 && !externals.iter().all(|r| view(r) == oracle) {
            clock.advance(1_000);
            fed.sync_bridges_once();
            passes += 1;
        }
        ensure(externals.iter().all(|r| view(r) == oracle), || format!("run {run}: not converged after 2 passes"))?;
        max_passes = max_passes.max(passes);
        clock.advance(1_000);
        let again = fed.sync_bridges_once();
        ensure(again.values().all(|r| r.is_quiet()), || format!("run {run}: second sync {again:?}"))?;
    }
    Ok(format!("64 federations, converged within {max_passes} pass(es), then quiet"))
}

fn access_policy() -> Check {
    use common::matrix::{cases, fingerprint, fixture};
    let n = cases(&fixture()).len();
    let mut internal = 0;
    for i in 0..n {
        let f = fixture();
        let case = cases(&f).remove(i);
        let r = send(&f.rt, case.request(Caller::internal(P)));
        ensure(r.status == case.internal, || format!("internal {}: {} {}", case.label(), r.status, r.json()))?;
        internal += 1;
    }
    let f = fixture();
    let paths: BTreeSet<String> = cases(&f).iter().map(|c| c.path.clone()).collect();
    let mut external = 0;
    let before = fingerprint(&f.rt);
    for case in cases(&f) {
        for verb in Verb::ALL {
            if verb == Verb::Get || case.open() {
                continue;
            }
            let mut req = case.request(Caller::external(P));
            req.method = verb.as_str().to_string();
            let r = send(&f.rt, req);
            ensure(r.status == 403, || format!("external {verb} {}: {}", case.path, r.status))?;
            ensure(fingerprint(&f.rt) == before, || format!("external {verb} {} changed state", case.path))?;
            external += 1;
        }
    }
    Ok(format!("{internal} internal routes per contract, {external} external writes over {} paths refused", paths.len()))
}

const T0: i64 = 1_700_000_000_000;
const HOUR: i64 = 3_600_000;

fn vars(v: Value) -> Variables {
    v.as_object().unwrap().clone()
}

fn engine_config(seed: u64) -> EngineConfig {
    let mut c = EngineConfig::new(P, seed);
    c.context = vars(json!({"selfOrg": P, "selfInternal": "http://p.internal", "selfExternal": "http://p.external"}));
    c.directory = Directory::default().with("alice", &["plant-engineers"]).with("bob", &["process-engineers"]);
    c
}

fn responder(seed: u64) -> Arc<dyn ServiceInvoker> {
    let rng = parking_lot::Mutex::new(ChaCha8Rng::seed_from_u64(seed));
    Arc::new(move |_: &ServiceRequest| {
        let roll: u8 = rng.lock().gen_range(0..10);
        match roll {
            0 => Err("timeout".to_string()),
            1 => Ok(ServiceResponse { status: 503, body: String::new() }),
            _ => Ok(ServiceResponse { status: 200, body: r#"{"id":"urn:p:clone:1"}"#.into() }),
        }
    })
}

fn open_task(engine: &Engine, instance: &str) -> Option<String> {
    engine
        .tasks_of(instance)
        .into_iter()
        .find(|t| t.status == TaskStatus::Open)
        .map(|t| t.task_id)
}

fn new_engine(seed: u64, clock: Arc<ManualClock>, invoker: Arc<dyn ServiceInvoker>) -> Engine {
    let e = Engine::new(engine_config(seed), clock, invoker).unwrap();
    for (_, xml) in templates::bundled() {
        e.deploy(xml.as_bytes()).unwrap();
    }
    e
}

fn strip(audit: &[AuditRecord]) -> Vec<(String, AuditEvent)> {
    audit.iter().map(|r| (r.instance_id.clone(), r.event.clone())).collect()
}

fn determinism() -> Check {
    let mut records = 0;
    for run in 0..50u64 {
        let clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
        let calls = Arc::new(RecordingInvoker::new(responder(run)));
        let engine = new_engine(run, clock.clone(), calls.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + run);
        for _ in 0..rng.gen_range(1..4) {
            let inst = engine
                .start_instance(
                    "clone-approval",
                    vars(json!({"aasId": "urn:o:aas:A", "assetId": "urn:asset:I", "sourceOrg": "org-o", "sourceVersion": 1})),
                )
                .unwrap();
            if let Some(t) = open_task(&engine, &inst.instance_id).filter(|_| rng.gen_bool(0.8)) {
                let d = if rng.gen_bool(0.5) { "approve" } else { "reject" };
                let _ = engine.complete_user_task(&t, "alice", vars(json!({"decision": d})));
            }
        }
        for k in 0..rng.gen_range(1..4) {
            let rid = format!("req-{k}");
            let v = vars(json!({"requestId": rid, "providerExternal": "http://o.external", "smPath": "c20", "statusPath": "r.status",
                "faultDescription": "leak", "requestedServiceType": "repair"}));
            let inst = engine.start_instance("service-request", v).unwrap();
            if let Some(t) = open_task(&engine, &inst.instance_id) {
                let _ = engine.complete_user_task(&t, "bob", vars(json!({"initiate": rng.gen_bool(0.7)})));
            }
            clock.advance(rng.gen_range(0..2 * HOUR));
            match rng.gen_range(0..3) {
                0 => {
                    let env = Envelope::new(O, "workflow", &rid, 0, Action::WorkflowSignal);
                    engine.deliver_message(&format!("workflow/{P}/service-receipt/r-{k}/acknowledged"), &env);
                }
                1 => {
                    engine.fire_timers(clock.now());
                }
                _ => {}
            }
        }
        clock.advance(2 * HOUR);
        engine.fire_timers(clock.now());

        let replay_clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
        let replayed = new_engine(run, replay_clock.clone(), Arc::new(ReplayInvoker::new(calls.calls())));
        replay(&replayed, &replay_clock, &engine.inputs()).map_err(|e| format!("run {run}: {e}"))?;
        let (a, b) = (strip(&engine.audit_log()), strip(&replayed.audit_log()));
        ensure(a == b, || format!("run {run}: audit differs"))?;
        records += a.len();
    }
    Ok(format!("50 runs, {records} audit records reproduced"))
}

fn clone_approval() -> Check {
    let count_calls = |rt: &aasfed::Runtime| {
        rt.engine(P)
            .unwrap()
            .audit_log()
            .iter()
            .filter(|r| matches!(&r.event, AuditEvent::ServiceCall { request, .. } if request.url.ends_with("/clone")))
            .count()
    };
    let (rt, _) = runtime();
    let (a, _) = publish_source(&rt);
    let env = Envelope::new(O, "shell", a.id.as_str(), a.version, Action::Created).with_body(serde_json::to_value(&a).unwrap());
    for _ in 0..3 {
        rt.federation()
            .bus()
            .publish("aas-repo/org-o", &aasfed_core::bus::topics::shell(O, &a.id, Action::Created), env.clone())
            .unwrap();
    }
    settle(&rt);
    let pending = instances(&rt, P, "clone-approval").len();
    ensure(pending == 1, || format!("{pending} instances after redelivery"))?;
    let clone_id = approve_clone(&rt);
    let shells = rt.federation().repo(P).unwrap().live_state().0;
    ensure(count_calls(&rt) == 1, || format!("{} /clone calls", count_calls(&rt)))?;
    ensure(shells.len() == 1 && shells[0].id.as_str() == clone_id, || format!("{} shells", shells.len()))?;

    let (rt, _) = runtime();
    publish_source(&rt);
    let task = tasks(&rt, P, "plant-engineers")[0]["taskId"].as_str().unwrap().to_string();
    complete(&rt, P, "alice", &task, json!({"decision": "reject"}));
    ensure(count_calls(&rt) == 0, || "reject made a call".into())?;
    ensure(rt.federation().repo(P).unwrap().live_state().0.is_empty(), || "reject made a shell".into())?;
    Ok("approve: 1 call, 1 shell; reject: 0 calls; 3 redeliveries, 1 instance".into())
}

fn service_request() -> Check {
    let (rt, _) = runtime();
    add_request(&rt, "ack");
    let mut trail = vec![request_status(&rt, "ack")];
    confirm(&rt, "ack", true);
    trail.push(request_status(&rt, "ack"));
    let receipt = tasks(&rt, O, "service-technicians");
    complete(&rt, O, "carol", receipt[0]["taskId"].as_str().unwrap(), json!({}));
    settle(&rt);
    trail.push(request_status(&rt, "ack"));
    ensure(trail == ["draft", "submitted", "acknowledged"], || format!("ack path {trail:?}"))?;

    let (rt, clock) = runtime();
    let tick = rt.config().timer_tick_ms as i64;
    add_request(&rt, "late");
    confirm(&rt, "late", true);
    clock.advance(HOUR_MS - tick);
    rt.tick();
    settle(&rt);
    let early = request_status(&rt, "late");
    clock.advance(tick);
    rt.tick();
    settle(&rt);
    let due = request_status(&rt, "late");
    ensure(early == "submitted" && due == "expired", || format!("one tick early: {early}, on the tick: {due}"))?;

    let (rt, clock) = runtime();
    add_request(&rt, "no");
    confirm(&rt, "no", false);
    clock.advance(2 * HOUR_MS);
    rt.tick();
    settle(&rt);
    let declined = request_status(&rt, "no");
    ensure(declined == "draft", || format!("declined request is {declined}"))?;
    Ok(format!("draft->submitted->acknowledged; expired on the due tick ({tick} ms); decline stays draft"))
}

fn snapshot_store() -> Check {
    let (rt, _) = runtime();
    publish_source(&rt);
    let o = Caller::internal(O);
    let live_bytes = |rt: &aasfed::Runtime| -> Vec<Vec<u8>> {
        let (shells, submodels) = rt.federation().repo(O).unwrap().live_state();
        shells
            .iter()
            .map(|s| canonical_json(&serde_json::to_value(s).unwrap()))
            .chain(submodels.iter().map(|s| canonical_json(&serde_json::to_value(s).unwrap())))
            .collect()
    };
    let commit = |rt: &aasfed::Runtime, m: &str| -> String {
        ok(rt, ApiRequest::new(Caller::internal(O), "POST", "/snapshots").json(&json!({"message": m})))["commitId"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let at_c1 = live_bytes(&rt);
    let c1 = commit(&rt, "c1");
    let sm = id("urn:org-o:sm:S").to_path();
    ok(&rt, ApiRequest::new(o.clone(), "PATCH", &format!("/submodels/{sm}/elements/P/value")).json(&json!("30.5")));
    let c2 = commit(&rt, "c2");
    let diff = ok(&rt, ApiRequest::get(o.clone(), &format!("/snapshots/{c1}/diff/{c2}")));
    ensure(diff.as_array().map(Vec::len) == Some(1), || format!("diff {diff}"))?;

    let extra = Shell::new(id("urn:org-o:aas:extra"), id("urn:asset:X"), "extra");
    ok(&rt, ApiRequest::new(o.clone(), "POST", "/shells").json(&extra));
    ok(&rt, ApiRequest::new(o.clone(), "POST", &format!("/snapshots/{c1}/checkout")));
    ensure(live_bytes(&rt) == at_c1, || "checkout is not byte-exact".into())?;

    ok(&rt, ApiRequest::new(o.clone(), "POST", &format!("/snapshots/{c2}/checkout")));
    ok(&rt, ApiRequest::new(o.clone(), "POST", &format!("/snapshots/{c1}/promote")));
    let value = |caller: Caller| {
        let v: Submodel = serde_json::from_value(ok(&rt, ApiRequest::get(caller, &format!("/submodels/{sm}")))).unwrap();
        value_of(&v, "P").unwrap_or_default()
    };
    let (ext, int) = (value(Caller::external(O)), value(Caller::internal(O)));
    ensure(ext == "20.0" && int == "30.5", || format!("external {ext}, internal {int}"))?;
    Ok("round trip byte-exact; 1-entry diff; external pinned at c1, internal at latest".into())
}

fn naive_match(pattern: &[&str], topic: &[&str]) -> bool {
    match (pattern.first(), topic.first()) {
        (Some(&"#"), _) => pattern.len() == 1,
        (Some(&"+"), Some(_)) => naive_match(&pattern[1..], &topic[1..]),
        (Some(p), Some(t)) => p == t && naive_match(&pattern[1..], &topic[1..]),
        (None, None) => true,
        _ => false,
    }
}

fn topic_matching() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words = ["aas-repo", "org-o", "shells", "x", "created"];
    let mut matched = 0;
    for i in 0..10_000 {
        let plen = rng.gen_range(1..6);
        let mut pattern: Vec<&str> = (0..plen)
            .map(|_| if rng.gen_bool(0.25) { "+" } else { words[rng.gen_range(0..words.len())] })
            .collect();
        if rng.gen_bool(0.3) {
            pattern.push("#");
        }
        let topic: Vec<&str> = (0..rng.gen_range(1..7)).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let (p, t) = (pattern.join("/"), topic.join("/"));
        let got = match_topic(&p, &t).map_err(|e| format!("{p}: {e}"))?;
        ensure(got == naive_match(&pattern, &topic), || format!("pair {i}: {p} vs {t}"))?;
        matched += usize::from(got);
    }
    let malformed = ["", "a/#/b", "a#", "a/b+", "#/a", "a/+x", "a/b/#/", "++"];
    for p in malformed {
        ensure(TopicFilter::parse(p).is_err(), || format!("accepted {p:?}"))?;
    }
    Ok(format!("10000 pairs ({matched} matches), {} malformed patterns rejected", malformed.len()))
}

fn tag_counts(xml: &str) -> (usize, usize) {
    let nodes = [
        "startEvent",
        "endEvent",
        "userTask",
        "serviceTask",
        "exclusiveGateway",
        "intermediateCatchEvent",
        "boundaryEvent",
    ];
    let n = nodes.iter().map(|t| xml.matches(&format!("<{t} ")).count() + xml.matches(&format!("<{t}>")).count()).sum();
    (n, xml.matches("<sequenceFlow ").count())
}

fn parser_corpus() -> Check {
    for (name, xml) in [("clone-approval", templates::CLONE_APPROVAL), ("service-request", templates::SERVICE_REQUEST)] {
        let t = parse_bpmn(xml.as_bytes()).map_err(|e| format!("{name}: {e}"))?;
        let want = tag_counts(xml);
        ensure((t.nodes.len(), t.flows.len()) == want, || format!("{name}: {:?} != {want:?}", (t.nodes.len(), t.flows.len())))?;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../bpmn/tests/corpus/negative");
    let mut files: Vec<_> = std::fs::read_dir(&dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    files.sort();
    ensure(files.len() == 10, || format!("{} negative files", files.len()))?;
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        let err = match parse_bpmn(&std::fs::read(f).unwrap()) {
            Ok(_) => return Err(format!("{name} parsed")),
            Err(e) => e,
        };
        let named = match name.split('-').next().unwrap_or("") {
            "unsupported" => matches!(err, ParseError::UnsupportedElement(_)),
            "unreachable" => matches!(&err, ParseError::GraphInvalid(r) if r.contains("unreachable")),
            "bad" => matches!(err, ParseError::BadExpression { .. }),
            "duplicate" => matches!(&err, ParseError::GraphInvalid(r) if r.starts_with("duplicate id")),
            _ => false,
        };
        ensure(named, || format!("{name}: {err}"))?;
    }
    Ok(format!("2 templates match tag counts; {} negative files raise their named error", files.len()))
}

fn main() {
    let checks: [Criterion; 10] = [
        ("clone-modify-extend scenario", clone_modify_extend),
        ("copy-on-write transparency", copy_on_write),
        ("bridge convergence", bridge_convergence),
        ("access policy matrix", access_policy),
        ("workflow determinism", determinism),
        ("clone-approval workflow", clone_approval),
        ("service-request workflow", service_request),
        ("snapshot store", snapshot_store),
        ("topic matching", topic_matching),
        ("BPMN parser corpus", parser_corpus),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
