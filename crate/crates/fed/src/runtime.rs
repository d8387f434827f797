//! Starts every service of a federation in one process and wires the
//! workflow triggers onto the bus.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use aasfed_bpmn::engine::{Directory, EngineConfig, EngineError, InstanceFilter, Variables};
use aasfed_bpmn::Engine;
use aasfed_core::bus::{BusConfig, BusError, Event, EventBus, Subscription};
use aasfed_core::clock::{Clock, SystemClock};
use aasfed_core::federation::{Bridges, Federation, FederationError, OrgSpec};
use aasfed_core::model::Submodel;
use aasfed_core::registry::{BridgeConfig, SyncReport};
use aasfed_core::repository::Organization;
use parking_lot::Mutex;
use serde_json::{json, Value};

use crate::api::{Api, Caller};
use crate::config::{ConfigError, FederationConfig, OrganizationConfig};
use crate::invokers::{Endpoints, InvokerContext, InvokerRegistry};
use crate::smc::{find_requests, RequestStatus, ValidatorRegistry};

pub const CLONE_APPROVAL: &str = "clone-approval";
pub const SERVICE_REQUEST: &str = "service-request";

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("workflow engine of {org}: {source}")]
    Engine { org: String, source: EngineError },
    #[error(transparent)]
    Bus(#[from] BusError),
}

pub struct RuntimeOptions {
    pub clock: Arc<dyn Clock>,
    /// Run bridge tasks and the timer ticker on background threads.
    pub background: bool,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            clock: Arc::new(SystemClock),
            background: true,
        }
    }
}

impl RuntimeOptions {
    /// Virtual time, no background threads: tests drive bridges and timers.
    pub fn manual(clock: Arc<dyn Clock>) -> Self {
        RuntimeOptions {
            clock,
            background: false,
        }
    }
}

/// Trigger deduplication: the bus delivers at least once.
#[derive(Default)]
struct Seen {
    shells: Mutex<HashSet<(String, String, u64)>>,
    requests: Mutex<HashSet<(String, String)>>,
}

pub struct Runtime {
    config: FederationConfig,
    clock: Arc<dyn Clock>,
    federation: Arc<Federation>,
    api: Arc<Api>,
    engines: BTreeMap<String, Arc<Engine>>,
    subscriptions: Mutex<Vec<Subscription>>,
    bridges: Mutex<Option<Bridges>>,
    ticker: Mutex<Option<(Arc<AtomicBool>, JoinHandle<()>)>>,
}

fn engine_err(org: &str) -> impl Fn(EngineError) -> RuntimeError + '_ {
    move |source| RuntimeError::Engine {
        org: org.to_string(),
        source,
    }
}

fn organization(o: &OrganizationConfig) -> Organization {
    Organization {
        org_id: o.org_id.clone(),
        display_name: o.display_name.clone().unwrap_or_else(|| o.org_id.clone()),
        internal_base_url: o.internal_url(),
        external_base_url: o.external_url(),
    }
}

impl Runtime {
    pub fn start(config: FederationConfig, options: RuntimeOptions) -> Result<Arc<Runtime>, RuntimeError> {
        config.validate()?;
        let clock = options.clock;
        let bus = EventBus::new(
            BusConfig {
                max_attempts: config.bus.max_attempts,
                initial_backoff: Duration::from_millis(config.bus.initial_backoff_ms),
                dead_letter_log: config.bus.dead_letter_log.clone(),
            },
            clock.clone(),
        );
        let specs = config
            .organizations
            .iter()
            .map(|o| OrgSpec {
                org: organization(o),
                external_registry: o.external_registry,
                data_dir: config.data_dir.as_ref().map(|d| d.join(&o.org_id)),
                store_backend: o.store_backend.clone(),
            })
            .collect();
        let federation = Federation::build(specs, bus, clock.clone())?;

        let validators = ValidatorRegistry::default();
        for o in &config.organizations {
            let repo = federation.repo(&o.org_id)?;
            for name in &o.validators {
                if let Some(v) = validators.create(name) {
                    repo.add_validator(v);
                }
            }
        }

        let api = Arc::new(Api::new(federation.clone()));
        let mut endpoints = Endpoints::default();
        for o in &config.organizations {
            endpoints.add(&o.internal_url(), Caller::internal(&o.org_id));
            endpoints.add(&o.external_url(), Caller::external(&o.org_id));
        }
        let endpoints = Arc::new(endpoints);
        let invokers = InvokerRegistry::default();

        let mut engines = BTreeMap::new();
        for (i, o) in config.organizations.iter().enumerate() {
            let ctx = InvokerContext {
                org: o.org_id.clone(),
                api: Arc::downgrade(&api),
                endpoints: endpoints.clone(),
                token: o.service_token.clone(),
            };
            let invoker = invokers
                .create(&config.invoker, &ctx)
                .expect("invoker name checked by validate");
            let mut ec = EngineConfig::new(&o.org_id, o.seed);
            ec.context = json!({
                "selfOrg": o.org_id,
                "selfInternal": o.internal_url(),
                "selfExternal": o.external_url(),
            })
            .as_object()
            .cloned()
            .unwrap_or_default();
            ec.directory = Directory { users: o.users.clone() };
            ec.data_dir = config.data_dir.as_ref().map(|d| d.join(&o.org_id).join("engine"));
            let engine = Arc::new(Engine::new(ec, clock.clone(), invoker).map_err(engine_err(&o.org_id))?);
            for t in config.templates_of(i)? {
                engine.deploy(t.xml.as_bytes()).map_err(engine_err(&o.org_id))?;
            }
            api.add_engine(&o.org_id, engine.clone());
            engines.insert(o.org_id.clone(), engine);
        }

        let rt = Arc::new(Runtime {
            config,
            clock,
            federation,
            api,
            engines,
            subscriptions: Mutex::new(Vec::new()),
            bridges: Mutex::new(None),
            ticker: Mutex::new(None),
        });
        rt.subscribe()?;
        rt.federation.sync_bridges_once();
        if options.background {
            rt.start_background()?;
        }
        tracing::info!(orgs = ?rt.federation.org_ids(), "federation started");
        Ok(rt)
    }

    fn subscribe(&self) -> Result<(), RuntimeError> {
        let bus = self.federation.bus();
        let seen = Arc::new(Seen::default());
        let mut subs = Vec::new();
        for o in &self.config.organizations {
            let engine = self.engines[&o.org_id].clone();
            let e = engine.clone();
            subs.push(bus.subscribe(
                &format!("engine-{}", o.org_id),
                &format!("workflow/{}/#", o.org_id),
                Arc::new(move |ev: &Event| {
                    e.deliver_message(&ev.topic, &ev.envelope);
                    Ok(())
                }),
            )?);

            if o.clone_approval_enabled() && engine.template(CLONE_APPROVAL).is_some() {
                for i in engine.list_instances(&InstanceFilter {
                    process_key: Some(CLONE_APPROVAL.into()),
                    state: None,
                }) {
                    if let (Some(Value::String(id)), Some(v)) = (i.variables.get("aasId"), i.variables.get("sourceVersion")) {
                        seen.shells.lock().insert((o.org_id.clone(), id.clone(), v.as_u64().unwrap_or(0)));
                    }
                }
                let (org, e, seen) = (o.org_id.clone(), engine.clone(), seen.clone());
                subs.push(bus.subscribe(
                    &format!("clone-approval-{}", o.org_id),
                    "aas-repo/+/shells/+/created",
                    Arc::new(move |ev: &Event| clone_approval_trigger(&org, &e, &seen, ev)),
                )?);
            }

            if let Some(provider) = &o.service_provider {
                if engine.template(SERVICE_REQUEST).is_none() {
                    continue;
                }
                for i in engine.list_instances(&InstanceFilter {
                    process_key: Some(SERVICE_REQUEST.into()),
                    state: None,
                }) {
                    if let Some(Value::String(id)) = i.variables.get("requestId") {
                        seen.requests.lock().insert((o.org_id.clone(), id.clone()));
                    }
                }
                let provider_external = self
                    .config
                    .organization(provider)
                    .map(|p| p.external_url())
                    .unwrap_or_default();
                let (org, provider, e, seen) = (o.org_id.clone(), provider.clone(), engine.clone(), seen.clone());
                subs.push(bus.subscribe(
                    &format!("service-request-{}", o.org_id),
                    &format!("sm-repo/{}/submodels/+/+", o.org_id),
                    Arc::new(move |ev: &Event| service_request_trigger(&org, &provider, &provider_external, &e, &seen, ev)),
                )?);
            }
        }
        self.subscriptions.lock().extend(subs);
        Ok(())
    }

    fn start_background(self: &Arc<Self>) -> Result<(), RuntimeError> {
        let bridges = self.federation.spawn_bridges(BridgeConfig {
            sync_interval: Duration::from_millis(self.config.bridge.sync_interval_ms),
            debounce: Duration::from_millis(self.config.bridge.debounce_ms),
        })?;
        *self.bridges.lock() = Some(bridges);
        let stop = Arc::new(AtomicBool::new(false));
        let (flag, rt) = (stop.clone(), Arc::downgrade(self));
        let tick = Duration::from_millis(self.config.timer_tick_ms);
        let handle = std::thread::Builder::new()
            .name("timer-ticker".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    std::thread::sleep(tick);
                    match rt.upgrade() {
                        Some(rt) => {
                            rt.tick();
                        }
                        None => break,
                    }
                }
            })
            .expect("spawn timer thread");
        *self.ticker.lock() = Some((stop, handle));
        Ok(())
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn federation(&self) -> &Arc<Federation> {
        &self.federation
    }

    pub fn api(&self) -> &Arc<Api> {
        &self.api
    }

    pub fn engine(&self, org: &str) -> Option<&Arc<Engine>> {
        self.engines.get(org)
    }

    pub fn engines(&self) -> impl Iterator<Item = (&String, &Arc<Engine>)> {
        self.engines.iter()
    }

    /// Fires every timer due at the current clock time; returns the
    /// instances that moved.
    pub fn tick(&self) -> Vec<String> {
        let now = self.clock.now();
        self.engines.values().flat_map(|e| e.fire_timers(now)).collect()
    }

    /// One synchronous bridge pass over every external registry.
    pub fn sync_bridges(&self) -> BTreeMap<String, SyncReport> {
        self.federation.sync_bridges_once()
    }

    pub fn wait_idle(&self, timeout: Duration) -> bool {
        self.federation.bus().wait_idle(timeout)
    }

    pub fn shutdown(&self) {
        if let Some((stop, handle)) = self.ticker.lock().take() {
            stop.store(true, Ordering::SeqCst);
            if handle.thread().id() != std::thread::current().id() {
                let _ = handle.join();
            }
        }
        if let Some(b) = self.bridges.lock().take() {
            b.stop();
        }
        for s in self.subscriptions.lock().drain(..) {
            s.unsubscribe();
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// A foreign shell appeared: ask this organization whether to clone it.
fn clone_approval_trigger(org: &str, engine: &Engine, seen: &Seen, ev: &Event) -> Result<(), String> {
    let env = &ev.envelope;
    if env.org_id == org {
        return Ok(());
    }
    let Some(asset_id) = env.body.as_ref().and_then(|b| b.get("assetId")).and_then(Value::as_str) else {
        tracing::warn!(topic = %ev.topic, "shell event without body");
        return Ok(());
    };
    let key = (org.to_string(), env.entity_id.clone(), env.version);
    if !seen.shells.lock().insert(key.clone()) {
        return Ok(());
    }
    let mut vars = Variables::new();
    vars.insert("aasId".into(), json!(env.entity_id));
    vars.insert("assetId".into(), json!(asset_id));
    vars.insert("sourceOrg".into(), json!(env.org_id));
    vars.insert("sourceVersion".into(), json!(env.version));
    match engine.start_instance(CLONE_APPROVAL, vars) {
        Ok(i) => {
            tracing::info!(%org, shell = %env.entity_id, instance = %i.instance_id, "clone approval requested");
            Ok(())
        }
        Err(e) => {
            seen.shells.lock().remove(&key);
            Err(e.to_string())
        }
    }
}

/// A draft service request was stored: run the request workflow for it.
fn service_request_trigger(
    org: &str,
    provider: &str,
    provider_external: &str,
    engine: &Engine,
    seen: &Seen,
    ev: &Event,
) -> Result<(), String> {
    let Some(body) = &ev.envelope.body else {
        return Ok(());
    };
    let Ok(sm) = serde_json::from_value::<Submodel>(body.clone()) else {
        return Ok(());
    };
    for (path, found) in find_requests(&sm) {
        let req = match found {
            Ok(r) if r.status == RequestStatus::Draft => r,
            Ok(_) => continue,
            Err(e) => {
                tracing::warn!(%org, submodel = %sm.id, %path, "malformed service request: {e}");
                continue;
            }
        };
        let request_id = format!("{}#{path}", sm.id);
        let key = (org.to_string(), request_id.clone());
        if !seen.requests.lock().insert(key.clone()) {
            continue;
        }
        let mut vars = Variables::new();
        vars.insert("requestId".into(), json!(request_id));
        vars.insert("smPath".into(), json!(sm.id.to_path()));
        vars.insert("statusPath".into(), json!(format!("{path}.status")));
        vars.insert("providerOrg".into(), json!(provider));
        vars.insert("providerExternal".into(), json!(provider_external));
        vars.insert("requesterOrg".into(), json!(req.requester_org));
        vars.insert("faultDescription".into(), json!(req.fault_description));
        vars.insert("requestedServiceType".into(), json!(req.requested_service_type));
        if let Err(e) = engine.start_instance(SERVICE_REQUEST, vars) {
            seen.requests.lock().remove(&key);
            return Err(e.to_string());
        }
        tracing::info!(%org, %request_id, "service request workflow started");
    }
    Ok(())
}
