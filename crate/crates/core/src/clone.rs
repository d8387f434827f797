//! Copy-on-write cloning across organizations.
//!
//! Only the hosting organization mutates its shells and submodels. Another
//! organization that needs changes clones the shell under a fresh id that
//! keeps the asset ID, copies a referenced submodel lazily on the first
//! write addressed to it, and may add submodels of its own. Sources are
//! always read through the owner's external listener.

use std::sync::{Arc, Weak};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::federation::{Federation, FederationError};
use crate::model::{CloneProvenance, Entity, Identifier, Shell, Submodel, SubmodelElement};
use crate::repository::{RemoteSubmodelHook, RepoError, Role};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloneError {
    #[error("source organization {0} unreachable")]
    SourceUnreachable(String),
    #[error("source {0} is not published by its organization")]
    SourceNotFound(String),
    #[error("requested version {requested} is gone; {published} is published")]
    VersionGone { requested: u64, published: u64 },
    #[error("requested version {requested} is not published yet; {published} is published")]
    VersionNotPublished { requested: u64, published: u64 },
    #[error("source and target organization are both {0}")]
    SelfClone(String),
    #[error("{0} is not a remote reference of the clone")]
    NotARemoteReference(String),
    #[error("unknown organization {0}")]
    UnknownOrg(String),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

impl From<FederationError> for CloneError {
    fn from(e: FederationError) -> Self {
        match e {
            FederationError::UnknownOrg(o) => CloneError::UnknownOrg(o),
            FederationError::Repo(RepoError::Unreachable(o)) => CloneError::SourceUnreachable(o),
            FederationError::Repo(r) => CloneError::Repo(r),
            other => CloneError::Repo(RepoError::Storage(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloneMode {
    #[default]
    ShellOnly,
    WithSubmodels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CloneRequest {
    pub source_org_id: String,
    pub source_shell_id: Identifier,
    pub source_version: u64,
    pub target_org_id: String,
    pub requested_by: String,
    #[serde(default)]
    pub mode: CloneMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContributedSubmodel {
    pub submodel_id: Identifier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadows: Option<Identifier>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Contribution {
    pub org_id: String,
    pub shell_id: Identifier,
    pub submodels: Vec<ContributedSubmodel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsolidatedAssetView {
    pub asset_id: Identifier,
    pub contributions: Vec<Contribution>,
    pub partial: bool,
}

pub fn clone_id(org: &str) -> Identifier {
    Identifier::new(format!("urn:{org}:clone:{}", Uuid::new_v4())).expect("clone ids are valid")
}

impl Federation {
    pub fn clone_shell(&self, req: &CloneRequest) -> Result<Shell, CloneError> {
        if req.source_org_id == req.target_org_id {
            return Err(CloneError::SelfClone(req.source_org_id.clone()));
        }
        self.org(&req.source_org_id)?;
        let target = self.org(&req.target_org_id)?.clone();
        let _serial = self.clone_lock.lock();
        let _guard = target.repo.begin_mutation();

        if let Some(existing) = self.find_clone(&req.target_org_id, req) {
            return Ok(existing);
        }

        let source = self
            .read_external_shell(&req.source_org_id, &req.source_shell_id)
            .map_err(|e| match CloneError::from(e) {
                CloneError::Repo(RepoError::NotFound(_)) => CloneError::SourceNotFound(req.source_shell_id.to_string()),
                other => other,
            })?;
        if source.version > req.source_version {
            return Err(CloneError::VersionGone {
                requested: req.source_version,
                published: source.version,
            });
        }
        if source.version < req.source_version {
            return Err(CloneError::VersionNotPublished {
                requested: req.source_version,
                published: source.version,
            });
        }

        let now = self.clock().now();
        let mut refs = source.submodel_refs.clone();
        if req.mode == CloneMode::WithSubmodels {
            for r in refs.iter_mut() {
                match self.read_external_submodel(&req.source_org_id, r) {
                    Ok(sm) => {
                        let copy = self.copy_submodel_into(&req.target_org_id, &req.source_org_id, &sm)?;
                        *r = copy.id;
                    }
                    // References the source does not host itself stay remote.
                    Err(FederationError::Repo(RepoError::NotFound(_))) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let shell = Shell {
            id: clone_id(&req.target_org_id),
            asset_id: source.asset_id.clone(),
            id_short: source.id_short.clone(),
            submodel_refs: refs,
            provenance: Some(CloneProvenance {
                source_id: source.id.clone(),
                source_version: source.version,
                source_organization: req.source_org_id.clone(),
                cloned_at: now,
            }),
            version: 1,
        };
        tracing::info!(
            source = %source.id, target_org = %req.target_org_id, by = %req.requested_by,
            "cloned shell as {}", shell.id
        );
        Ok(target.repo.create_shell(Role::Internal, shell)?)
    }

    fn find_clone(&self, target_org: &str, req: &CloneRequest) -> Option<Shell> {
        let repo = &self.org(target_org).ok()?.repo;
        let (shells, _) = repo.live_state();
        shells.into_iter().find(|s| {
            s.provenance.as_ref().is_some_and(|p| {
                p.source_id == req.source_shell_id
                    && p.source_version == req.source_version
                    && p.source_organization == req.source_org_id
            })
        })
    }

    fn copy_submodel_into(&self, target_org: &str, source_org: &str, source: &Submodel) -> Result<Submodel, CloneError> {
        let target = self.org(target_org)?;
        let src_node = self.org(source_org)?;
        let mut digests = Vec::new();
        collect_digests(&source.elements, &mut digests);
        for d in digests {
            let bytes = src_node
                .repo
                .blob(&d)
                .ok_or_else(|| CloneError::Repo(RepoError::NotFound(format!("blob {d}"))))?;
            target.repo.store_blob(&bytes)?;
        }
        let copy = Submodel {
            id: clone_id(target_org),
            id_short: source.id_short.clone(),
            semantic_id: source.semantic_id.clone(),
            elements: source.elements.clone(),
            provenance: Some(CloneProvenance {
                source_id: source.id.clone(),
                source_version: source.version,
                source_organization: source_org.to_string(),
                cloned_at: self.clock().now(),
            }),
            version: 1,
        };
        Ok(target.repo.create_submodel(Role::Internal, copy)?)
    }

    /// Organization hosting `submodel_id`, preferring the shell's source.
    fn locate_submodel(&self, shell: &Shell, submodel_id: &Identifier, exclude: &str) -> Option<String> {
        if let Some(p) = &shell.provenance {
            if p.source_organization != exclude {
                if let Ok(node) = self.org(&p.source_organization) {
                    if node.submodel_registry.get(submodel_id).ok().flatten().is_some()
                        || node.repo.get_submodel(Role::External, submodel_id).is_ok()
                    {
                        return Some(p.source_organization.clone());
                    }
                }
            }
        }
        self.orgs()
            .filter(|n| n.id() != exclude)
            .find(|n| {
                n.submodel_registry.get(submodel_id).ok().flatten().is_some()
                    || n.repo.get_submodel(Role::External, submodel_id).is_ok()
            })
            .map(|n| n.id().to_string())
    }

    /// Copies a remotely referenced submodel into the clone's organization
    /// and relinks the clone to the copy.
    pub fn copy_on_write_submodel(
        &self,
        target_org: &str,
        clone_shell_id: &Identifier,
        source_submodel_id: &Identifier,
    ) -> Result<Submodel, CloneError> {
        let target = self.org(target_org)?.clone();
        let _serial = self.clone_lock.lock();
        let _guard = target.repo.begin_mutation();
        let shell = target.repo.get_shell(Role::Internal, clone_shell_id)?;
        if !shell.submodel_refs.contains(source_submodel_id) || target.repo.has_local_submodel(source_submodel_id) {
            return Err(CloneError::NotARemoteReference(source_submodel_id.to_string()));
        }
        let source_org = self
            .locate_submodel(&shell, source_submodel_id, target_org)
            .ok_or_else(|| match &shell.provenance {
                Some(p) if !self.org(&p.source_organization).map(|n| n.is_reachable()).unwrap_or(false) => {
                    CloneError::SourceUnreachable(p.source_organization.clone())
                }
                _ => CloneError::SourceNotFound(source_submodel_id.to_string()),
            })?;
        let source = self
            .read_external_submodel(&source_org, source_submodel_id)
            .map_err(|e| match CloneError::from(e) {
                CloneError::Repo(RepoError::NotFound(_)) => CloneError::SourceNotFound(source_submodel_id.to_string()),
                other => other,
            })?;
        let copy = self.copy_submodel_into(target_org, &source_org, &source)?;
        let mut relinked = shell;
        for r in relinked.submodel_refs.iter_mut() {
            if r == source_submodel_id {
                *r = copy.id.clone();
            }
        }
        target.repo.update_shell(Role::Internal, relinked)?;
        Ok(copy)
    }

    /// Adds original content (no provenance) to a shell of `target_org`.
    pub fn add_new_submodel(
        &self,
        target_org: &str,
        shell_id: &Identifier,
        mut submodel: Submodel,
    ) -> Result<Submodel, CloneError> {
        let target = self.org(target_org)?.clone();
        let _serial = self.clone_lock.lock();
        let _guard = target.repo.begin_mutation();
        let mut shell = target.repo.get_shell(Role::Internal, shell_id)?;
        if shell.submodel_refs.contains(&submodel.id) {
            return Err(CloneError::Repo(RepoError::AlreadyExists(submodel.id.to_string())));
        }
        submodel.provenance = None;
        let created = target.repo.create_submodel(Role::Internal, submodel)?;
        shell.submodel_refs.push(created.id.clone());
        target.repo.update_shell(Role::Internal, shell)?;
        Ok(created)
    }

    /// Everything the federation publishes about one asset, grouped per
    /// organization, with copied submodels linked to what they shadow.
    pub fn consolidated_view(&self, asset_id: &Identifier) -> ConsolidatedAssetView {
        let discovery = self.discover(asset_id);
        let mut partial = discovery.partial;
        let mut contributions = Vec::new();
        for desc in &discovery.descriptors {
            let shell = match self.read_external_shell(&desc.org_id, &desc.shell_id) {
                Ok(s) => s,
                Err(FederationError::Repo(RepoError::NotFound(_))) => continue,
                Err(_) => {
                    partial = true;
                    continue;
                }
            };
            let submodels = shell
                .submodel_refs
                .iter()
                .map(|r| ContributedSubmodel {
                    submodel_id: r.clone(),
                    shadows: self
                        .read_external_submodel(&desc.org_id, r)
                        .ok()
                        .and_then(|sm| sm.provenance().map(|p| p.source_id.clone())),
                })
                .collect();
            contributions.push(Contribution {
                org_id: desc.org_id.clone(),
                shell_id: shell.id.clone(),
                submodels,
            });
        }
        ConsolidatedAssetView {
            asset_id: asset_id.clone(),
            contributions,
            partial,
        }
    }
}

fn collect_digests(elements: &[SubmodelElement], out: &mut Vec<crate::model::Digest>) {
    for e in elements {
        match e {
            SubmodelElement::FileAttachment { digest: Some(d), .. } => out.push(*d),
            SubmodelElement::Collection { elements, .. } => collect_digests(elements, out),
            _ => {}
        }
    }
}

/// Repository hook that turns the first write to a remote submodel into a
/// copy-on-write.
pub(crate) struct WriteThrough {
    pub(crate) federation: Weak<Federation>,
}

impl RemoteSubmodelHook for WriteThrough {
    fn materialize(&self, org: &str, submodel_id: &Identifier) -> Result<Option<Identifier>, RepoError> {
        let Some(fed) = self.federation.upgrade() else {
            return Ok(None);
        };
        let fed: Arc<Federation> = fed;
        let repo = &fed.org(org).map_err(|e| RepoError::Storage(e.to_string()))?.repo;
        let (shells, _) = repo.live_state();
        let Some(shell) = shells.iter().find(|s| s.submodel_refs.contains(submodel_id)) else {
            return Ok(None);
        };
        match fed.copy_on_write_submodel(org, &shell.id, submodel_id) {
            Ok(copy) => Ok(Some(copy.id)),
            Err(CloneError::SourceUnreachable(o)) => Err(RepoError::Unreachable(o)),
            Err(CloneError::SourceNotFound(_)) => Ok(None),
            Err(CloneError::Repo(r)) => Err(r),
            Err(e) => Err(RepoError::Storage(e.to_string())),
        }
    }
}
