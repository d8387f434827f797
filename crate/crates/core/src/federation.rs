//! The set of organizations sharing one bus, with their repositories,
//! registries and snapshot stores.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::bus::{Action, Event, EventBus, Subscription};
use crate::clock::Clock;
use crate::model::{Digest, Identifier};
use crate::registry::{
    discover_by_asset_id, BridgeConfig, BridgeHandle, Discovery, RegistryKind, RegistryPair, ShellDescriptor,
    ShellRegistry, SubmodelDescriptor, SubmodelRegistry, SyncReport, SyncTarget,
};
use crate::repository::{Change, ChangeListener, Organization, RepoError, Repository, Role};
use crate::snapshot::{DiffEntry, ObjectStoreRegistry, SnapshotCommit, SnapshotError, SnapshotStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FederationError {
    #[error("unknown organization {0}")]
    UnknownOrg(String),
    #[error("duplicate organization {0}")]
    DuplicateOrg(String),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// How to build one organization.
#[derive(Debug, Clone)]
pub struct OrgSpec {
    pub org: Organization,
    pub external_registry: bool,
    /// Directory for the repository log and snapshot objects; in-memory when unset.
    pub data_dir: Option<PathBuf>,
    pub store_backend: String,
}

impl OrgSpec {
    pub fn in_memory(org_id: &str, external_registry: bool) -> Self {
        OrgSpec {
            org: Organization {
                org_id: org_id.to_string(),
                display_name: org_id.to_string(),
                internal_base_url: format!("http://{org_id}.internal"),
                external_base_url: format!("http://{org_id}.external"),
            },
            external_registry,
            data_dir: None,
            store_backend: "memory".into(),
        }
    }
}

pub struct OrgNode {
    pub org: Organization,
    pub repo: Arc<Repository>,
    pub shell_registry: Arc<ShellRegistry>,
    pub submodel_registry: Arc<SubmodelRegistry>,
    pub external_shell_registry: Option<Arc<ShellRegistry>>,
    pub external_submodel_registry: Option<Arc<SubmodelRegistry>>,
    pub snapshots: SnapshotStore,
    reachable: AtomicBool,
}

impl OrgNode {
    pub fn id(&self) -> &str {
        &self.org.org_id
    }

    pub fn is_reachable(&self) -> bool {
        self.reachable.load(Ordering::SeqCst)
    }
}

/// Keeps an organization's internal registries in step with its repository.
struct Registrar {
    org: Organization,
    shells: Arc<ShellRegistry>,
    submodels: Arc<SubmodelRegistry>,
    clock: Arc<dyn Clock>,
}

impl ChangeListener for Registrar {
    fn on_change(&self, _org: &str, change: &Change) {
        let now = self.clock.now();
        let result = match change {
            Change::Shell {
                action: Action::Deleted,
                shell,
            } => self.shells.unregister(&shell.id).map(|_| ()),
            Change::Shell { shell, .. } => self.shells.register(ShellDescriptor {
                shell_id: shell.id.clone(),
                asset_id: shell.asset_id.clone(),
                org_id: self.org.org_id.clone(),
                endpoint: self.org.external_base_url.clone(),
                version: shell.version,
                last_synced_at: now,
            }),
            Change::Submodel {
                action: Action::Deleted,
                submodel,
            } => self.submodels.unregister(&submodel.id).map(|_| ()),
            Change::Submodel { submodel, .. } => self.submodels.register(SubmodelDescriptor {
                submodel_id: submodel.id.clone(),
                semantic_id: submodel.semantic_id.clone(),
                org_id: self.org.org_id.clone(),
                endpoint: self.org.external_base_url.clone(),
                version: submodel.version,
                last_synced_at: now,
            }),
        };
        if let Err(e) = result {
            tracing::warn!(org = %self.org.org_id, "registry not updated: {e}");
        }
    }
}

pub struct Federation {
    orgs: BTreeMap<String, Arc<OrgNode>>,
    bus: EventBus,
    clock: Arc<dyn Clock>,
    pub(crate) clone_lock: Mutex<()>,
}

impl std::fmt::Debug for Federation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Federation")
            .field("orgs", &self.orgs.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Federation {
    pub fn build(specs: Vec<OrgSpec>, bus: EventBus, clock: Arc<dyn Clock>) -> Result<Arc<Self>, FederationError> {
        let backends = ObjectStoreRegistry::default();
        let mut orgs = BTreeMap::new();
        for spec in specs {
            let org_id = spec.org.org_id.clone();
            if orgs.contains_key(&org_id) {
                return Err(FederationError::DuplicateOrg(org_id));
            }
            let repo = match &spec.data_dir {
                Some(dir) => Repository::open(&org_id, &dir.join("repository.log"), Some(bus.clone()))?,
                None => Repository::in_memory(&org_id, Some(bus.clone())),
            };
            let store_root = spec
                .data_dir
                .as_ref()
                .map(|d| d.join("snapshots"))
                .unwrap_or_default();
            let snapshots = SnapshotStore::new(backends.open(&spec.store_backend, &store_root)?);
            let shell_registry = Arc::new(ShellRegistry::new(RegistryKind::Internal, &org_id));
            let submodel_registry = Arc::new(SubmodelRegistry::new(RegistryKind::Internal, &org_id));
            let node = OrgNode {
                external_shell_registry: spec
                    .external_registry
                    .then(|| Arc::new(ShellRegistry::new(RegistryKind::External, &org_id))),
                external_submodel_registry: spec
                    .external_registry
                    .then(|| Arc::new(SubmodelRegistry::new(RegistryKind::External, &org_id))),
                org: spec.org,
                repo: Arc::new(repo),
                shell_registry,
                submodel_registry,
                snapshots,
                reachable: AtomicBool::new(true),
            };
            orgs.insert(org_id, Arc::new(node));
        }
        let fed = Arc::new(Federation {
            orgs,
            bus,
            clock: clock.clone(),
            clone_lock: Mutex::new(()),
        });
        for node in fed.orgs.values() {
            // Seed registries from recovered state before live changes flow.
            let registrar = Arc::new(Registrar {
                org: node.org.clone(),
                shells: node.shell_registry.clone(),
                submodels: node.submodel_registry.clone(),
                clock: clock.clone(),
            });
            let (shells, submodels) = node.repo.live_state();
            for shell in shells {
                registrar.on_change(node.id(), &Change::Shell {
                    action: Action::Created,
                    shell,
                });
            }
            for submodel in submodels {
                registrar.on_change(node.id(), &Change::Submodel {
                    action: Action::Created,
                    submodel,
                });
            }
            node.repo.add_listener(registrar);
            node.repo.set_remote_hook(Arc::new(crate::clone::WriteThrough {
                federation: Arc::downgrade(&fed),
            }));
            if let Some(stable) = node.snapshots.stable()? {
                let (set, blobs) = node.snapshots.stable_set(&stable)?;
                for b in blobs {
                    node.repo.store_blob(&b)?;
                }
                node.repo.set_stable(set);
            }
        }
        Ok(fed)
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn org(&self, org_id: &str) -> Result<&Arc<OrgNode>, FederationError> {
        self.orgs
            .get(org_id)
            .ok_or_else(|| FederationError::UnknownOrg(org_id.to_string()))
    }

    pub fn orgs(&self) -> impl Iterator<Item = &Arc<OrgNode>> {
        self.orgs.values()
    }

    pub fn org_ids(&self) -> Vec<String> {
        self.orgs.keys().cloned().collect()
    }

    pub fn repo(&self, org_id: &str) -> Result<&Arc<Repository>, FederationError> {
        Ok(&self.org(org_id)?.repo)
    }

    /// Fault injection: an unreachable organization refuses cross-org reads
    /// and its registries fail every call.
    pub fn set_reachable(&self, org_id: &str, reachable: bool) -> Result<(), FederationError> {
        let node = self.org(org_id)?;
        node.reachable.store(reachable, Ordering::SeqCst);
        node.shell_registry.set_reachable(reachable);
        node.submodel_registry.set_reachable(reachable);
        if let Some(r) = &node.external_shell_registry {
            r.set_reachable(reachable);
        }
        if let Some(r) = &node.external_submodel_registry {
            r.set_reachable(reachable);
        }
        Ok(())
    }

    pub fn external_shell_registries(&self) -> Vec<Arc<ShellRegistry>> {
        self.orgs
            .values()
            .filter_map(|n| n.external_shell_registry.clone())
            .collect()
    }

    pub fn internal_shell_registries(&self) -> Vec<Arc<ShellRegistry>> {
        self.orgs.values().map(|n| n.shell_registry.clone()).collect()
    }

    pub fn internal_submodel_registries(&self) -> Vec<Arc<SubmodelRegistry>> {
        self.orgs.values().map(|n| n.submodel_registry.clone()).collect()
    }

    pub fn discover(&self, asset_id: &Identifier) -> Discovery {
        discover_by_asset_id(&self.external_shell_registries(), asset_id)
    }

    fn sync_targets(&self, node: &OrgNode) -> Vec<Arc<dyn SyncTarget>> {
        let mut targets: Vec<Arc<dyn SyncTarget>> = Vec::new();
        if let Some(ext) = &node.external_shell_registry {
            targets.push(Arc::new(RegistryPair {
                external: ext.clone(),
                sources: self.internal_shell_registries(),
            }));
        }
        if let Some(ext) = &node.external_submodel_registry {
            targets.push(Arc::new(RegistryPair {
                external: ext.clone(),
                sources: self.internal_submodel_registries(),
            }));
        }
        targets
    }

    /// Runs one synchronous bridge pass for every external registry.
    pub fn sync_bridges_once(&self) -> BTreeMap<String, SyncReport> {
        let now = self.clock.now();
        let mut out = BTreeMap::new();
        for node in self.orgs.values() {
            let targets = self.sync_targets(node);
            if targets.is_empty() {
                continue;
            }
            let mut total = SyncReport::default();
            for t in targets {
                let r = t.sync(now);
                total.added += r.added;
                total.updated += r.updated;
                total.removed += r.removed;
                total.errors += r.errors;
            }
            out.insert(node.id().to_string(), total);
        }
        out
    }

    /// Starts a bridge task per external registry, triggered by the
    /// interval and by any shell or submodel repository event.
    pub fn spawn_bridges(&self, config: BridgeConfig) -> Result<Bridges, FederationError> {
        let mut handles = Vec::new();
        let mut subs = Vec::new();
        for node in self.orgs.values() {
            let targets = self.sync_targets(node);
            if targets.is_empty() {
                continue;
            }
            let handle = BridgeHandle::spawn(targets, config.clone(), self.clock.clone());
            for pattern in ["aas-repo/+/shells/#", "sm-repo/+/submodels/#"] {
                let h = Arc::downgrade(&handle);
                let sub = self
                    .bus
                    .subscribe(
                        &format!("bridge-{}", node.id()),
                        pattern,
                        Arc::new(move |_e: &Event| {
                            if let Some(h) = h.upgrade() {
                                h.trigger();
                            }
                            Ok(())
                        }),
                    )
                    .map_err(|e| FederationError::Repo(RepoError::Storage(e.to_string())))?;
                subs.push(sub);
            }
            handles.push((node.id().to_string(), handle));
        }
        Ok(Bridges { handles, subs })
    }

    // ---- snapshots ----

    pub fn snapshot_commit(
        &self,
        org_id: &str,
        tag: Option<String>,
        message: &str,
    ) -> Result<SnapshotCommit, FederationError> {
        let node = self.org(org_id)?;
        Ok(node.snapshots.commit(&node.repo, tag, message, self.clock.now())?)
    }

    pub fn snapshot_diff(&self, org_id: &str, a: &Digest, b: &Digest) -> Result<Vec<DiffEntry>, FederationError> {
        Ok(self.org(org_id)?.snapshots.diff(a, b)?)
    }

    pub fn snapshot_checkout(&self, org_id: &str, commit: &Digest) -> Result<usize, FederationError> {
        let node = self.org(org_id)?;
        Ok(node.snapshots.checkout(&node.repo, commit)?)
    }

    /// Pins the external listener of `org_id` to `commit`; internal reads
    /// keep serving the live state.
    pub fn promote_to_stable(&self, org_id: &str, commit: &Digest) -> Result<(), FederationError> {
        let node = self.org(org_id)?;
        let (set, blobs) = node.snapshots.stable_set(commit)?;
        for b in blobs {
            node.repo.store_blob(&b)?;
        }
        let now = self.clock.now();
        // Re-announce every promoted shell that is still live.
        for shell in set.shells.values() {
            if let Ok(Some(mut d)) = node.shell_registry.get(&shell.id) {
                d.last_synced_at = now;
                let _ = node.shell_registry.register(d);
            }
        }
        node.repo.set_stable(set);
        node.snapshots.set_stable(commit)?;
        Ok(())
    }

    /// Reads a shell the way another organization would: through the
    /// owner's external listener.
    pub fn read_external_shell(
        &self,
        org_id: &str,
        id: &Identifier,
    ) -> Result<crate::model::Shell, FederationError> {
        let node = self.org(org_id)?;
        if !node.is_reachable() {
            return Err(RepoError::Unreachable(org_id.to_string()).into());
        }
        Ok(node.repo.get_shell(Role::External, id)?)
    }

    pub fn read_external_submodel(
        &self,
        org_id: &str,
        id: &Identifier,
    ) -> Result<crate::model::Submodel, FederationError> {
        let node = self.org(org_id)?;
        if !node.is_reachable() {
            return Err(RepoError::Unreachable(org_id.to_string()).into());
        }
        Ok(node.repo.get_submodel(Role::External, id)?)
    }
}

/// Running bridge tasks and their event subscriptions.
pub struct Bridges {
    pub handles: Vec<(String, Arc<BridgeHandle>)>,
    subs: Vec<Subscription>,
}

impl Bridges {
    pub fn handle(&self, org_id: &str) -> Option<&Arc<BridgeHandle>> {
        self.handles.iter().find(|(o, _)| o == org_id).map(|(_, h)| h)
    }

    pub fn stop(self) {
        for s in self.subs {
            s.unsubscribe();
        }
        for (_, h) in self.handles {
            h.stop();
        }
    }
}
