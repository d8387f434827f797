//! Scripted end-to-end scenarios, runnable by name from the CLI.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Duration;

use aasfed_core::clock::{Clock, ManualClock, Timestamp};
use aasfed_core::clone::ConsolidatedAssetView;
use aasfed_core::model::{Digest, Entity, Identifier, Shell, Submodel, SubmodelElement, ValueType};
use aasfed_core::repository::Role;
use serde_json::{json, Value};

use crate::api::{ApiRequest, Caller};
use crate::config::FederationConfig;
use crate::runtime::{Runtime, RuntimeOptions};
use crate::smc::{find_requests, ServiceRequestSmc};

pub type DemoResult = Result<(), String>;

pub trait Demo: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn run(&self, out: &mut dyn Write) -> DemoResult;
}

pub struct DemoRegistry {
    demos: BTreeMap<&'static str, Box<dyn Demo>>,
}

impl Default for DemoRegistry {
    fn default() -> Self {
        let mut r = DemoRegistry { demos: BTreeMap::new() };
        r.register(Box::new(CloneDemo));
        r.register(Box::new(ServiceRequestDemo));
        r
    }
}

impl DemoRegistry {
    pub fn register(&mut self, demo: Box<dyn Demo>) {
        self.demos.insert(demo.name(), demo);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Demo> {
        self.demos.get(name).map(|d| d.as_ref())
    }

    pub fn list(&self) -> impl Iterator<Item = &dyn Demo> {
        self.demos.values().map(|d| d.as_ref())
    }
}

pub const DEMO_START: i64 = 1_704_067_200_000;
const IDLE: Duration = Duration::from_secs(10);

/// The two-organization demo federation on a virtual clock.
pub fn demo_runtime() -> Result<(Arc<Runtime>, Arc<ManualClock>), String> {
    let clock = Arc::new(ManualClock::new(Timestamp::from_millis(DEMO_START)));
    let rt = Runtime::start(FederationConfig::demo(), RuntimeOptions::manual(clock.clone())).map_err(|e| e.to_string())?;
    Ok((rt, clock))
}

/// Sends one API request and returns the JSON body of a 2xx response.
pub fn call(rt: &Runtime, req: ApiRequest) -> Result<Value, String> {
    let what = format!("{} {}", req.method, req.path);
    let resp = rt.api().handle(&req);
    if resp.is_success() {
        Ok(resp.json())
    } else {
        Err(format!("{what}: {} {}", resp.status, resp.json()))
    }
}

fn settle(rt: &Runtime) -> DemoResult {
    if rt.wait_idle(IDLE) {
        Ok(())
    } else {
        Err("event bus did not settle".into())
    }
}

fn id(s: &str) -> Identifier {
    Identifier::new(s).expect("demo identifiers are valid")
}

/// Commits the live state of `org` and serves it on the external listener.
pub fn publish(rt: &Runtime, org: &str, message: &str) -> Result<String, String> {
    let commit = call(rt, ApiRequest::new(Caller::internal(org), "POST", "/snapshots").json(&json!({"message": message})))?;
    let cid = commit["commitId"].as_str().ok_or("commit without id")?.to_string();
    call(rt, ApiRequest::new(Caller::internal(org), "POST", &format!("/snapshots/{cid}/promote")))?;
    Ok(cid)
}

fn source_digests(rt: &Runtime, org: &str) -> Result<Vec<Digest>, String> {
    let (shells, submodels) = rt.federation().repo(org).map_err(|e| e.to_string())?.live_state();
    let mut out = Vec::new();
    for s in shells {
        out.push(s.content_digest().map_err(|e| e.to_string())?);
    }
    for s in submodels {
        out.push(s.content_digest().map_err(|e| e.to_string())?);
    }
    Ok(out)
}

pub fn render_view(view: &ConsolidatedAssetView) -> String {
    let mut s = format!("asset {}\n", view.asset_id);
    for c in &view.contributions {
        s.push_str(&format!("  {:<12} shell {}\n", c.org_id, c.shell_id));
        for sm in &c.submodels {
            match &sm.shadows {
                Some(src) => s.push_str(&format!("  {:<12}   submodel {} shadows {}\n", "", sm.submodel_id, src)),
                None => s.push_str(&format!("  {:<12}   submodel {}\n", "", sm.submodel_id)),
            }
        }
    }
    if view.partial {
        s.push_str("  (partial: some organizations were unreachable)\n");
    }
    s
}

fn w(out: &mut dyn Write, line: impl AsRef<str>) -> DemoResult {
    writeln!(out, "{}", line.as_ref()).map_err(|e| e.to_string())
}

/// Clone A into O', modify P (copying S to S'), add S'' and show the
/// consolidated view of asset I.
pub struct CloneDemo;

impl Demo for CloneDemo {
    fn name(&self) -> &'static str {
        "clone"
    }

    fn summary(&self) -> &'static str {
        "copy-on-write cloning between org-o and org-oprime"
    }

    fn run(&self, out: &mut dyn Write) -> DemoResult {
        let (rt, _clock) = demo_runtime()?;
        let o = Caller::internal("org-o");
        let p = Caller::internal("org-oprime");

        let mut s = Submodel::new(id("urn:org-o:sm:S"), "Operation");
        s.elements.push(SubmodelElement::property("P", ValueType::Double, "20.0"));
        let mut a = Shell::new(id("urn:org-o:aas:A"), id("urn:asset:I"), "A");
        a.submodel_refs.push(s.id.clone());
        call(&rt, ApiRequest::new(o.clone(), "POST", "/submodels").json(&s))?;
        call(&rt, ApiRequest::new(o.clone(), "POST", "/shells").json(&a))?;
        publish(&rt, "org-o", "release A")?;
        settle(&rt)?;
        rt.sync_bridges();
        let before = source_digests(&rt, "org-o")?;
        w(out, "org-o published shell urn:org-o:aas:A for asset urn:asset:I")?;

        let tasks = call(&rt, ApiRequest::get(p.clone().as_user("alice"), "/tasks?group=plant-engineers"))?;
        let task = tasks
            .as_array()
            .and_then(|t| t.first())
            .ok_or("no approval task at org-oprime")?;
        let task_id = task["taskId"].as_str().unwrap_or_default().to_string();
        w(out, format!("org-oprime approval task {task_id} opened"))?;
        let inst = call(
            &rt,
            ApiRequest::new(p.clone().as_user("alice"), "POST", &format!("/tasks/{task_id}/complete"))
                .json(&json!({"values": {"decision": "approve", "comment": "needed for commissioning"}})),
        )?;
        let clone_id = inst["variables"]["cloneId"].as_str().ok_or("approval did not clone")?.to_string();
        w(out, format!("alice approved; clone {clone_id} created"))?;

        let sm_path = s.id.to_path();
        call(
            &rt,
            ApiRequest::new(p.clone(), "PATCH", &format!("/submodels/{sm_path}/elements/P/value")).json(&json!("21.5")),
        )?;
        let clone_shell: Shell = serde_json::from_value(call(
            &rt,
            ApiRequest::get(p.clone(), &format!("/shells/{}", id(&clone_id).to_path())),
        )?)
        .map_err(|e| e.to_string())?;
        w(out, format!("org-oprime set P = 21.5; the clone now references {}", clone_shell.submodel_refs[0]))?;

        let mut s2 = Submodel::new(id("urn:org-oprime:sm:S2"), "Maintenance");
        s2.elements.push(SubmodelElement::property("interval", ValueType::Integer, "90"));
        call(
            &rt,
            ApiRequest::new(p.clone(), "POST", &format!("/shells/{}/submodels", id(&clone_id).to_path())).json(&s2),
        )?;
        w(out, "org-oprime added submodel urn:org-oprime:sm:S2")?;
        publish(&rt, "org-oprime", "release clone")?;
        settle(&rt)?;
        rt.sync_bridges();

        let view: ConsolidatedAssetView = serde_json::from_value(call(
            &rt,
            ApiRequest::get(Caller::external("org-oprime"), &format!("/assets/{}/consolidated", id("urn:asset:I").to_path())),
        )?)
        .map_err(|e| e.to_string())?;
        w(out, "")?;
        w(out, render_view(&view))?;

        let after = source_digests(&rt, "org-o")?;
        let source_p = rt
            .federation()
            .repo("org-o")
            .and_then(|r| Ok(r.get_submodel(Role::Internal, &s.id)?))
            .map_err(|e| e.to_string())?;
        w(out, format!("source organization unchanged: {}", before == after))?;
        w(out, format!("P at org-o: {:?}", source_p.element("P")))?;
        if before != after {
            return Err("source organization changed".into());
        }
        Ok(())
    }
}

/// The cross-organization service request, acknowledged once and left to
/// expire once.
pub struct ServiceRequestDemo;

fn request_status(rt: &Runtime, org: &str, sm: &Identifier, path: &str) -> Result<String, String> {
    let sm = rt
        .federation()
        .repo(org)
        .and_then(|r| Ok(r.get_submodel(Role::Internal, sm)?))
        .map_err(|e| e.to_string())?;
    match find_requests(&sm).remove(path) {
        Some(Ok(r)) => Ok(r.status.to_string()),
        _ => Err(format!("no service request at {path}")),
    }
}

fn open_task(rt: &Runtime, caller: Caller, group: &str) -> Result<String, String> {
    let tasks = call(rt, ApiRequest::get(caller, &format!("/tasks?group={group}")))?;
    tasks
        .as_array()
        .and_then(|t| t.first())
        .and_then(|t| t["taskId"].as_str())
        .map(str::to_string)
        .ok_or_else(|| format!("no open {group} task"))
}

impl Demo for ServiceRequestDemo {
    fn name(&self) -> &'static str {
        "service-request"
    }

    fn summary(&self) -> &'static str {
        "service request from org-oprime to org-o, acknowledged and expired"
    }

    fn run(&self, out: &mut dyn Write) -> DemoResult {
        let (rt, clock) = demo_runtime()?;
        let p = Caller::internal("org-oprime");
        let o = Caller::internal("org-o");
        let sm_id = id("urn:org-oprime:sm:service");
        let mut sm = Submodel::new(sm_id.clone(), "Service");
        sm.elements
            .push(ServiceRequestSmc::draft("pumpLeak", "org-oprime", "pump P-101 leaking at the seal", "repair").to_element());
        call(&rt, ApiRequest::new(p.clone(), "POST", "/submodels").json(&sm))?;
        settle(&rt)?;
        let mut trail = vec![request_status(&rt, "org-oprime", &sm_id, "pumpLeak")?];

        let task = open_task(&rt, p.clone(), "process-engineers")?;
        call(
            &rt,
            ApiRequest::new(p.clone().as_user("bob"), "POST", &format!("/tasks/{task}/complete"))
                .json(&json!({"values": {"initiate": true}})),
        )?;
        settle(&rt)?;
        trail.push(request_status(&rt, "org-oprime", &sm_id, "pumpLeak")?);
        w(out, "bob confirmed the request; org-o received it")?;

        let receipt = open_task(&rt, o.clone(), "service-technicians")?;
        call(
            &rt,
            ApiRequest::new(o.clone().as_user("carol"), "POST", &format!("/tasks/{receipt}/complete"))
                .json(&json!({"values": {"comment": "technician scheduled"}})),
        )?;
        settle(&rt)?;
        trail.push(request_status(&rt, "org-oprime", &sm_id, "pumpLeak")?);
        w(out, format!("carol confirmed receipt; status: {}", trail.join(" -> ")))?;

        // A second request nobody answers.
        let mut sm2 = rt
            .federation()
            .repo("org-oprime")
            .and_then(|r| Ok(r.get_submodel(Role::Internal, &sm_id)?))
            .map_err(|e| e.to_string())?;
        sm2.elements
            .push(ServiceRequestSmc::draft("valveNoise", "org-oprime", "valve V-7 chattering", "inspection").to_element());
        call(&rt, ApiRequest::new(p.clone(), "PUT", &format!("/submodels/{}", sm_id.to_path())).json(&sm2))?;
        settle(&rt)?;
        let task = open_task(&rt, p.clone(), "process-engineers")?;
        call(
            &rt,
            ApiRequest::new(p.clone().as_user("bob"), "POST", &format!("/tasks/{task}/complete"))
                .json(&json!({"values": {"initiate": true}})),
        )?;
        settle(&rt)?;
        let mut expired = vec!["draft".to_string(), request_status(&rt, "org-oprime", &sm_id, "valveNoise")?];
        clock.advance(3_600_000);
        rt.tick();
        settle(&rt)?;
        expired.push(request_status(&rt, "org-oprime", &sm_id, "valveNoise")?);
        w(out, format!("unanswered request after one hour; status: {}", expired.join(" -> ")))?;
        let now = clock.now();
        w(out, format!("virtual time {now}"))?;

        if trail != ["draft", "submitted", "acknowledged"] || expired != ["draft", "submitted", "expired"] {
            return Err("unexpected status sequence".into());
        }
        Ok(())
    }
}
