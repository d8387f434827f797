//! Descriptor registries, asset-ID discovery and the registry bridge.
//!
//! Shell and submodel registries share one generic record store. An
//! internal registry only accepts its own organization's descriptors; an
//! external registry is filled by the bridge from every internal registry.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp};
use crate::model::Identifier;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("internal registry of {registry} cannot hold a descriptor of {descriptor}")]
    WrongOrganization { registry: String, descriptor: String },
    #[error("registry of {0} unreachable")]
    Unreachable(String),
    #[error("not found: {0}")]
    NotFound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistryKind {
    Internal,
    External,
}

pub trait Descriptor: Clone + PartialEq + Serialize + DeserializeOwned + Send + Sync + 'static {
    fn key(&self) -> &Identifier;
    fn org_id(&self) -> &str;
    fn synced_at(&self) -> Timestamp;
    fn set_synced_at(&mut self, t: Timestamp);

    /// Equality ignoring bookkeeping timestamps.
    fn same_content(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.set_synced_at(Timestamp::EPOCH);
        let mut b = other.clone();
        b.set_synced_at(Timestamp::EPOCH);
        a == b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ShellDescriptor {
    pub shell_id: Identifier,
    pub asset_id: Identifier,
    pub org_id: String,
    pub endpoint: String,
    pub version: u64,
    pub last_synced_at: Timestamp,
}

impl Descriptor for ShellDescriptor {
    fn key(&self) -> &Identifier {
        &self.shell_id
    }
    fn org_id(&self) -> &str {
        &self.org_id
    }
    fn synced_at(&self) -> Timestamp {
        self.last_synced_at
    }
    fn set_synced_at(&mut self, t: Timestamp) {
        self.last_synced_at = t;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubmodelDescriptor {
    pub submodel_id: Identifier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_id: Option<Identifier>,
    pub org_id: String,
    pub endpoint: String,
    pub version: u64,
    pub last_synced_at: Timestamp,
}

impl Descriptor for SubmodelDescriptor {
    fn key(&self) -> &Identifier {
        &self.submodel_id
    }
    fn org_id(&self) -> &str {
        &self.org_id
    }
    fn synced_at(&self) -> Timestamp {
        self.last_synced_at
    }
    fn set_synced_at(&mut self, t: Timestamp) {
        self.last_synced_at = t;
    }
}

pub struct Registry<D: Descriptor> {
    kind: RegistryKind,
    owner: String,
    records: RwLock<BTreeMap<Identifier, D>>,
    reachable: AtomicBool,
}

pub type ShellRegistry = Registry<ShellDescriptor>;
pub type SubmodelRegistry = Registry<SubmodelDescriptor>;

impl<D: Descriptor> std::fmt::Debug for Registry<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("owner", &self.owner)
            .finish_non_exhaustive()
    }
}

impl<D: Descriptor> Registry<D> {
    pub fn new(kind: RegistryKind, owner: &str) -> Self {
        Registry {
            kind,
            owner: owner.to_string(),
            records: RwLock::new(BTreeMap::new()),
            reachable: AtomicBool::new(true),
        }
    }

    pub fn kind(&self) -> RegistryKind {
        self.kind
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    /// Fault injection: an unreachable registry fails every call.
    pub fn set_reachable(&self, reachable: bool) {
        self.reachable.store(reachable, Ordering::SeqCst);
    }

    pub fn is_reachable(&self) -> bool {
        self.reachable.load(Ordering::SeqCst)
    }

    fn ensure_reachable(&self) -> Result<(), RegistryError> {
        if self.is_reachable() {
            Ok(())
        } else {
            Err(RegistryError::Unreachable(self.owner.clone()))
        }
    }

    /// Idempotent upsert keyed by the descriptor id.
    pub fn register(&self, desc: D) -> Result<(), RegistryError> {
        self.ensure_reachable()?;
        if self.kind == RegistryKind::Internal && desc.org_id() != self.owner {
            return Err(RegistryError::WrongOrganization {
                registry: self.owner.clone(),
                descriptor: desc.org_id().to_string(),
            });
        }
        self.records.write().insert(desc.key().clone(), desc);
        Ok(())
    }

    pub fn unregister(&self, key: &Identifier) -> Result<bool, RegistryError> {
        self.ensure_reachable()?;
        Ok(self.records.write().remove(key).is_some())
    }

    pub fn get(&self, key: &Identifier) -> Result<Option<D>, RegistryError> {
        self.ensure_reachable()?;
        Ok(self.records.read().get(key).cloned())
    }

    pub fn list(&self) -> Result<Vec<D>, RegistryError> {
        self.ensure_reachable()?;
        Ok(self.records.read().values().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Discovery {
    pub descriptors: Vec<ShellDescriptor>,
    /// Set when at least one registry could not be queried.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unreachable: Vec<String>,
}

/// Resolves an asset ID against every given registry, deduplicating by
/// shell id and ordering by (orgId, shellId).
pub fn discover_by_asset_id(registries: &[Arc<ShellRegistry>], asset_id: &Identifier) -> Discovery {
    let mut found: BTreeMap<Identifier, ShellDescriptor> = BTreeMap::new();
    let mut unreachable = Vec::new();
    for r in registries {
        match r.list() {
            Ok(list) => {
                for d in list.into_iter().filter(|d| &d.asset_id == asset_id) {
                    found.entry(d.shell_id.clone()).or_insert(d);
                }
            }
            Err(_) => unreachable.push(r.owner().to_string()),
        }
    }
    let mut descriptors: Vec<_> = found.into_values().collect();
    descriptors.sort_by(|a, b| (&a.org_id, &a.shell_id).cmp(&(&b.org_id, &b.shell_id)));
    Discovery {
        partial: !unreachable.is_empty(),
        descriptors,
        unreachable,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub added: usize,
    pub updated: usize,
    pub removed: usize,
    pub errors: usize,
}

impl SyncReport {
    pub fn is_quiet(&self) -> bool {
        *self == SyncReport::default()
    }
}

/// One reconciliation pass: the external registry becomes the union of the
/// reachable sources. Descriptors of unreachable sources are retained.
pub fn bridge_sync_once<D: Descriptor>(
    external: &Registry<D>,
    sources: &[Arc<Registry<D>>],
    now: Timestamp,
) -> SyncReport {
    let mut report = SyncReport::default();
    let mut wanted: BTreeMap<Identifier, D> = BTreeMap::new();
    let mut synced_orgs = BTreeSet::new();
    for src in sources {
        match src.list() {
            Ok(list) => {
                synced_orgs.insert(src.owner().to_string());
                for d in list {
                    wanted.insert(d.key().clone(), d);
                }
            }
            Err(e) => {
                tracing::warn!("bridge source skipped: {e}");
                report.errors += 1;
            }
        }
    }
    let Ok(current) = external.list() else {
        report.errors += 1;
        return report;
    };
    let current: BTreeMap<Identifier, D> = current.into_iter().map(|d| (d.key().clone(), d)).collect();

    for (key, mut desc) in wanted.clone() {
        match current.get(&key) {
            Some(existing) if existing.same_content(&desc) => {}
            existing => {
                desc.set_synced_at(now);
                if external.register(desc).is_ok() {
                    if existing.is_some() {
                        report.updated += 1;
                    } else {
                        report.added += 1;
                    }
                } else {
                    report.errors += 1;
                }
            }
        }
    }
    for (key, desc) in &current {
        if !wanted.contains_key(key) && synced_orgs.contains(desc.org_id()) && external.unregister(key).is_ok() {
            report.removed += 1;
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub sync_interval: Duration,
    pub debounce: Duration,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            sync_interval: Duration::from_millis(1000),
            debounce: Duration::from_millis(500),
        }
    }
}

/// A syncable pair of registries with its sources; lets shell and submodel
/// registries share one bridge task.
pub trait SyncTarget: Send + Sync {
    fn sync(&self, now: Timestamp) -> SyncReport;
}

pub struct RegistryPair<D: Descriptor> {
    pub external: Arc<Registry<D>>,
    pub sources: Vec<Arc<Registry<D>>>,
}

impl<D: Descriptor> SyncTarget for RegistryPair<D> {
    fn sync(&self, now: Timestamp) -> SyncReport {
        bridge_sync_once(&self.external, &self.sources, now)
    }
}

#[derive(Default)]
struct BridgeSignal {
    state: Mutex<SignalState>,
    cv: Condvar,
}

#[derive(Default)]
struct SignalState {
    triggered: bool,
    stopped: bool,
}

/// Periodic plus event-triggered bridge task. Runs never overlap.
pub struct BridgeHandle {
    signal: Arc<BridgeSignal>,
    runs: Arc<AtomicU64>,
    last: Arc<Mutex<SyncReport>>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl BridgeHandle {
    pub fn spawn(targets: Vec<Arc<dyn SyncTarget>>, config: BridgeConfig, clock: Arc<dyn Clock>) -> Arc<Self> {
        let signal = Arc::new(BridgeSignal::default());
        let runs = Arc::new(AtomicU64::new(0));
        let last = Arc::new(Mutex::new(SyncReport::default()));
        let (sig, r, l) = (signal.clone(), runs.clone(), last.clone());
        let handle = thread::Builder::new()
            .name("registry-bridge".into())
            .spawn(move || bridge_loop(targets, config, clock, sig, r, l))
            .expect("spawn bridge");
        Arc::new(BridgeHandle {
            signal,
            runs,
            last,
            thread: Mutex::new(Some(handle)),
        })
    }

    /// Requests a sync within one tick (debounced).
    pub fn trigger(&self) {
        let mut s = self.signal.state.lock();
        s.triggered = true;
        self.signal.cv.notify_all();
    }

    pub fn runs(&self) -> u64 {
        self.runs.load(Ordering::SeqCst)
    }

    pub fn last_report(&self) -> SyncReport {
        *self.last.lock()
    }

    pub fn wait_for_runs(&self, at_least: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.runs() < at_least {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(2));
        }
        true
    }

    pub fn stop(&self) {
        {
            let mut s = self.signal.state.lock();
            s.stopped = true;
            self.signal.cv.notify_all();
        }
        if let Some(h) = self.thread.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        let mut s = self.signal.state.lock();
        s.stopped = true;
        self.signal.cv.notify_all();
    }
}

fn bridge_loop(
    targets: Vec<Arc<dyn SyncTarget>>,
    config: BridgeConfig,
    clock: Arc<dyn Clock>,
    signal: Arc<BridgeSignal>,
    runs: Arc<AtomicU64>,
    last: Arc<Mutex<SyncReport>>,
) {
    let mut next_periodic = Instant::now() + config.sync_interval;
    let mut last_run: Option<Instant> = None;
    loop {
        {
            let mut s = signal.state.lock();
            loop {
                if s.stopped {
                    return;
                }
                let now = Instant::now();
                let debounced_ok = last_run.is_none_or(|t| now >= t + config.debounce);
                if s.triggered && debounced_ok {
                    s.triggered = false;
                    break;
                }
                if now >= next_periodic {
                    s.triggered = false;
                    break;
                }
                let mut wake = next_periodic;
                if s.triggered {
                    if let Some(t) = last_run {
                        wake = wake.min(t + config.debounce);
                    }
                }
                signal.cv.wait_until(&mut s, wake);
            }
        }
        let mut total = SyncReport::default();
        for t in &targets {
            let r = t.sync(clock.now());
            total.added += r.added;
            total.updated += r.updated;
            total.removed += r.removed;
            total.errors += r.errors;
        }
        *last.lock() = total;
        runs.fetch_add(1, Ordering::SeqCst);
        let now = Instant::now();
        last_run = Some(now);
        next_periodic = now + config.sync_interval;
    }
}
