//! Per-organization shell and submodel repository.
//!
//! Internal callers may read and write; external callers only read, and they
//! read the promoted "stable" set rather than the live state. Every
//! successful mutation is appended to the write-ahead log, announced to the
//! synchronous change listeners and published on the bus, in that order,
//! before the call returns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine as _;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::bus::{topics, Action, Envelope, EventBus};
use crate::model::{Digest, Entity, EntityKind, Identifier, ModelError, Shell, Submodel, SubmodelElement};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Organization {
    pub org_id: String,
    pub display_name: String,
    pub internal_base_url: String,
    pub external_base_url: String,
}

pub fn valid_org_id(org_id: &str) -> bool {
    !org_id.is_empty()
        && org_id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Internal,
    External,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Internal => "internal",
            Role::External => "external",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verb {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

impl Verb {
    pub const ALL: [Verb; 5] = [Verb::Get, Verb::Post, Verb::Put, Verb::Patch, Verb::Delete];

    pub fn parse(method: &str) -> Option<Verb> {
        match method.to_ascii_uppercase().as_str() {
            "GET" | "HEAD" => Some(Verb::Get),
            "POST" => Some(Verb::Post),
            "PUT" => Some(Verb::Put),
            "PATCH" => Some(Verb::Patch),
            "DELETE" => Some(Verb::Delete),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Get => "GET",
            Verb::Post => "POST",
            Verb::Put => "PUT",
            Verb::Patch => "PATCH",
            Verb::Delete => "DELETE",
        }
    }
}

impl std::fmt::Display for Verb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Verb filter keyed on the listener a request arrived on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPolicy {
    pub role: Role,
    pub allowed_verbs: BTreeSet<Verb>,
}

impl AccessPolicy {
    pub fn for_role(role: Role) -> Self {
        let allowed_verbs = match role {
            Role::Internal => Verb::ALL.into_iter().collect(),
            Role::External => [Verb::Get].into_iter().collect(),
        };
        AccessPolicy { role, allowed_verbs }
    }

    pub fn check(&self, verb: Verb) -> Result<(), RepoError> {
        if self.allowed_verbs.contains(&verb) {
            Ok(())
        } else {
            Err(RepoError::Forbidden { role: self.role, verb })
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RepoError {
    #[error("{verb} not allowed for {role} callers")]
    Forbidden { role: Role, verb: Verb },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("version conflict on {id}: expected {expected}, stored {actual}")]
    VersionConflict { id: String, expected: u64, actual: u64 },
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("no property at path {0:?}")]
    PathNotFound(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("rejected by {validator}: {reason}")]
    Rejected { validator: String, reason: String },
    #[error("checkout refused: mutations in flight")]
    DirtyCheckout,
    #[error("organization {0} unreachable")]
    Unreachable(String),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "camelCase")]
pub struct Page<T> {
    pub items: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_cursor: Option<String>,
}

/// A committed mutation, as seen by synchronous listeners.
#[derive(Debug, Clone)]
pub enum Change {
    Shell { action: Action, shell: Shell },
    Submodel { action: Action, submodel: Submodel },
}

impl Change {
    pub fn kind(&self) -> EntityKind {
        match self {
            Change::Shell { .. } => EntityKind::Shell,
            Change::Submodel { .. } => EntityKind::Submodel,
        }
    }
}

pub trait ChangeListener: Send + Sync {
    fn on_change(&self, org: &str, change: &Change);
}

/// Consulted when a write addresses a submodel this repository does not
/// hold; returns the id of a freshly made local copy to redirect the write to.
pub trait RemoteSubmodelHook: Send + Sync {
    fn materialize(&self, org: &str, submodel_id: &Identifier) -> Result<Option<Identifier>, RepoError>;
}

/// Domain rule applied to every submodel write.
pub trait SubmodelValidator: Send + Sync {
    fn name(&self) -> &str;
    fn check(&self, old: Option<&Submodel>, new: &Submodel) -> Result<(), String>;
}

/// The promoted, externally served state.
#[derive(Debug, Clone, Default)]
pub struct StableSet {
    pub commit_id: Option<Digest>,
    pub shells: BTreeMap<Identifier, Shell>,
    pub submodels: BTreeMap<Identifier, Submodel>,
}

#[derive(Debug, Clone, Default)]
struct RepoState {
    shells: BTreeMap<Identifier, Shell>,
    submodels: BTreeMap<Identifier, Submodel>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
enum WalRecord {
    PutShell { shell: Shell },
    PutSubmodel { submodel: Submodel },
    DeleteShell { id: Identifier },
    DeleteSubmodel { id: Identifier },
    PutBlob { digest: Digest, data: String },
    Restore { shells: Vec<Shell>, submodels: Vec<Submodel> },
}

struct Wal {
    path: PathBuf,
    file: File,
}

impl Wal {
    fn append(&mut self, record: &WalRecord) -> Result<(), RepoError> {
        let line = serde_json::to_string(record).map_err(|e| RepoError::Storage(e.to_string()))?;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| RepoError::Storage(format!("{}: {e}", self.path.display())))
    }
}

/// Held while a multi-step operation runs; checkout refuses to proceed
/// while any guard is alive.
pub struct MutationGuard<'a> {
    counter: &'a AtomicUsize,
}

impl Drop for MutationGuard<'_> {
    fn drop(&mut self) {
        self.counter.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct Repository {
    org: String,
    state: RwLock<RepoState>,
    blobs: RwLock<HashMap<Digest, Arc<Vec<u8>>>>,
    stable: RwLock<Option<StableSet>>,
    wal: Option<Mutex<Wal>>,
    bus: Option<EventBus>,
    listeners: RwLock<Vec<Arc<dyn ChangeListener>>>,
    validators: RwLock<Vec<Arc<dyn SubmodelValidator>>>,
    hook: OnceLock<Arc<dyn RemoteSubmodelHook>>,
    in_flight: AtomicUsize,
}

impl std::fmt::Debug for Repository {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Repository").field("org", &self.org).finish_non_exhaustive()
    }
}

impl Repository {
    pub fn in_memory(org: &str, bus: Option<EventBus>) -> Self {
        Repository {
            org: org.to_string(),
            state: RwLock::new(RepoState::default()),
            blobs: RwLock::new(HashMap::new()),
            stable: RwLock::new(None),
            wal: None,
            bus,
            listeners: RwLock::new(Vec::new()),
            validators: RwLock::new(Vec::new()),
            hook: OnceLock::new(),
            in_flight: AtomicUsize::new(0),
        }
    }

    /// Opens (or creates) a log-backed repository, replaying the log.
    pub fn open(org: &str, log_path: &Path, bus: Option<EventBus>) -> Result<Self, RepoError> {
        let mut repo = Repository::in_memory(org, bus);
        if log_path.exists() {
            let f = File::open(log_path).map_err(|e| RepoError::Storage(e.to_string()))?;
            let state = repo.state.get_mut();
            let blobs = repo.blobs.get_mut();
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| RepoError::Storage(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: WalRecord = match serde_json::from_str(&line) {
                    Ok(r) => r,
                    Err(e) => {
                        // A torn final write is expected after a crash.
                        tracing::warn!(line = n + 1, "ignoring unreadable log record: {e}");
                        continue;
                    }
                };
                apply_record(state, blobs, record)?;
            }
        }
        if let Some(dir) = log_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| RepoError::Storage(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| RepoError::Storage(format!("{}: {e}", log_path.display())))?;
        repo.wal = Some(Mutex::new(Wal {
            path: log_path.to_path_buf(),
            file,
        }));
        Ok(repo)
    }

    pub fn org(&self) -> &str {
        &self.org
    }

    pub fn add_listener(&self, listener: Arc<dyn ChangeListener>) {
        self.listeners.write().push(listener);
    }

    pub fn add_validator(&self, validator: Arc<dyn SubmodelValidator>) {
        self.validators.write().push(validator);
    }

    pub fn set_remote_hook(&self, hook: Arc<dyn RemoteSubmodelHook>) {
        let _ = self.hook.set(hook);
    }

    pub fn begin_mutation(&self) -> MutationGuard<'_> {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        MutationGuard {
            counter: &self.in_flight,
        }
    }

    fn log(&self, record: &WalRecord) -> Result<(), RepoError> {
        match &self.wal {
            Some(wal) => wal.lock().append(record),
            None => Ok(()),
        }
    }

    fn announce(&self, change: Change) {
        for l in self.listeners.read().iter() {
            l.on_change(&self.org, &change);
        }
        let Some(bus) = &self.bus else { return };
        let (topic, envelope) = match &change {
            Change::Shell { action, shell } => (
                topics::shell(&self.org, &shell.id, *action),
                Envelope::new(&self.org, "shell", shell.id.as_str(), shell.version, *action)
                    .with_body(serde_json::to_value(shell).unwrap_or_default()),
            ),
            Change::Submodel { action, submodel } => (
                topics::submodel(&self.org, &submodel.id, *action),
                Envelope::new(&self.org, "submodel", submodel.id.as_str(), submodel.version, *action)
                    .with_body(serde_json::to_value(submodel).unwrap_or_default()),
            ),
        };
        if let Err(e) = bus.publish(&format!("repo/{}", self.org), &topic, envelope) {
            tracing::warn!(org = %self.org, "event not published: {e}");
        }
    }

    fn stable_or_empty<R>(&self, f: impl FnOnce(&StableSet) -> R) -> R {
        let guard = self.stable.read();
        match guard.as_ref() {
            Some(s) => f(s),
            None => f(&StableSet::default()),
        }
    }

    // ---- shells ----

    pub fn create_shell(&self, role: Role, mut shell: Shell) -> Result<Shell, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Post)?;
        shell.version = 1;
        shell.validate()?;
        let mut state = self.state.write();
        if state.shells.contains_key(&shell.id) {
            return Err(RepoError::AlreadyExists(shell.id.to_string()));
        }
        self.log(&WalRecord::PutShell { shell: shell.clone() })?;
        state.shells.insert(shell.id.clone(), shell.clone());
        self.announce(Change::Shell {
            action: Action::Created,
            shell: shell.clone(),
        });
        Ok(shell)
    }

    pub fn get_shell(&self, role: Role, id: &Identifier) -> Result<Shell, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Get)?;
        let found = match role {
            Role::Internal => self.state.read().shells.get(id).cloned(),
            Role::External => self.stable_or_empty(|s| s.shells.get(id).cloned()),
        };
        found.ok_or_else(|| RepoError::NotFound(id.to_string()))
    }

    pub fn update_shell(&self, role: Role, mut shell: Shell) -> Result<Shell, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Put)?;
        shell.validate()?;
        let mut state = self.state.write();
        let stored = state
            .shells
            .get(&shell.id)
            .ok_or_else(|| RepoError::NotFound(shell.id.to_string()))?;
        if stored.version != shell.version {
            return Err(RepoError::VersionConflict {
                id: shell.id.to_string(),
                expected: shell.version,
                actual: stored.version,
            });
        }
        shell.version += 1;
        self.log(&WalRecord::PutShell { shell: shell.clone() })?;
        state.shells.insert(shell.id.clone(), shell.clone());
        self.announce(Change::Shell {
            action: Action::Updated,
            shell: shell.clone(),
        });
        Ok(shell)
    }

    pub fn delete_shell(&self, role: Role, id: &Identifier) -> Result<(), RepoError> {
        AccessPolicy::for_role(role).check(Verb::Delete)?;
        let mut state = self.state.write();
        let Some(shell) = state.shells.get(id).cloned() else {
            return Err(RepoError::NotFound(id.to_string()));
        };
        self.log(&WalRecord::DeleteShell { id: id.clone() })?;
        state.shells.remove(id);
        self.announce(Change::Shell {
            action: Action::Deleted,
            shell,
        });
        Ok(())
    }

    pub fn list_shells(&self, role: Role, cursor: Option<&str>, limit: usize) -> Result<Page<Shell>, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Get)?;
        let after = decode_cursor(cursor)?;
        Ok(match role {
            Role::Internal => paginate(&self.state.read().shells, after.as_ref(), limit),
            Role::External => self.stable_or_empty(|s| paginate(&s.shells, after.as_ref(), limit)),
        })
    }

    // ---- submodels ----

    fn run_validators(&self, old: Option<&Submodel>, new: &Submodel) -> Result<(), RepoError> {
        for v in self.validators.read().iter() {
            v.check(old, new).map_err(|reason| RepoError::Rejected {
                validator: v.name().to_string(),
                reason,
            })?;
        }
        Ok(())
    }

    pub fn create_submodel(&self, role: Role, mut submodel: Submodel) -> Result<Submodel, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Post)?;
        submodel.version = 1;
        submodel.validate()?;
        self.run_validators(None, &submodel)?;
        let mut state = self.state.write();
        if state.submodels.contains_key(&submodel.id) {
            return Err(RepoError::AlreadyExists(submodel.id.to_string()));
        }
        self.log(&WalRecord::PutSubmodel {
            submodel: submodel.clone(),
        })?;
        state.submodels.insert(submodel.id.clone(), submodel.clone());
        self.announce(Change::Submodel {
            action: Action::Created,
            submodel: submodel.clone(),
        });
        Ok(submodel)
    }

    pub fn get_submodel(&self, role: Role, id: &Identifier) -> Result<Submodel, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Get)?;
        let found = match role {
            Role::Internal => self.state.read().submodels.get(id).cloned(),
            Role::External => self.stable_or_empty(|s| s.submodels.get(id).cloned()),
        };
        found.ok_or_else(|| RepoError::NotFound(id.to_string()))
    }

    pub fn list_submodels(&self, role: Role, cursor: Option<&str>, limit: usize) -> Result<Page<Submodel>, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Get)?;
        let after = decode_cursor(cursor)?;
        Ok(match role {
            Role::Internal => paginate(&self.state.read().submodels, after.as_ref(), limit),
            Role::External => self.stable_or_empty(|s| paginate(&s.submodels, after.as_ref(), limit)),
        })
    }

    pub fn has_local_submodel(&self, id: &Identifier) -> bool {
        self.state.read().submodels.contains_key(id)
    }

    /// Local id a write to `id` should land on, copying a remote submodel
    /// first when needed. The flag is true when a copy was just made.
    fn resolve_for_write(&self, id: &Identifier) -> Result<(Identifier, bool), RepoError> {
        if self.has_local_submodel(id) {
            return Ok((id.clone(), false));
        }
        if let Some(hook) = self.hook.get() {
            if let Some(local) = hook.materialize(&self.org, id)? {
                return Ok((local, true));
            }
        }
        Err(RepoError::NotFound(id.to_string()))
    }

    pub fn update_submodel(&self, role: Role, mut submodel: Submodel) -> Result<Submodel, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Put)?;
        let (target, redirected) = self.resolve_for_write(&submodel.id)?;
        let mut state = self.state.write();
        let stored = state
            .submodels
            .get(&target)
            .ok_or_else(|| RepoError::NotFound(target.to_string()))?
            .clone();
        // A write that triggered the copy was made against the source version.
        let expected = match (&stored.provenance, redirected) {
            (Some(p), true) => p.source_version,
            _ => stored.version,
        };
        if submodel.version != expected {
            return Err(RepoError::VersionConflict {
                id: submodel.id.to_string(),
                expected: submodel.version,
                actual: expected,
            });
        }
        if redirected {
            submodel.id = stored.id.clone();
            submodel.provenance = stored.provenance.clone();
        }
        submodel.version = stored.version + 1;
        submodel.validate()?;
        self.run_validators(Some(&stored), &submodel)?;
        self.log(&WalRecord::PutSubmodel {
            submodel: submodel.clone(),
        })?;
        state.submodels.insert(submodel.id.clone(), submodel.clone());
        self.announce(Change::Submodel {
            action: Action::Updated,
            submodel: submodel.clone(),
        });
        Ok(submodel)
    }

    pub fn delete_submodel(&self, role: Role, id: &Identifier) -> Result<(), RepoError> {
        AccessPolicy::for_role(role).check(Verb::Delete)?;
        let mut state = self.state.write();
        let Some(submodel) = state.submodels.get(id).cloned() else {
            return Err(RepoError::NotFound(id.to_string()));
        };
        self.log(&WalRecord::DeleteSubmodel { id: id.clone() })?;
        state.submodels.remove(id);
        self.announce(Change::Submodel {
            action: Action::Deleted,
            submodel,
        });
        Ok(())
    }

    fn mutate_submodel(
        &self,
        id: &Identifier,
        f: impl FnOnce(&mut Submodel) -> Result<(), RepoError>,
    ) -> Result<Submodel, RepoError> {
        let (target, _) = self.resolve_for_write(id)?;
        let mut state = self.state.write();
        let stored = state
            .submodels
            .get(&target)
            .ok_or_else(|| RepoError::NotFound(target.to_string()))?;
        let mut updated = stored.clone();
        f(&mut updated)?;
        updated.version = stored.version + 1;
        updated.validate()?;
        self.run_validators(Some(stored), &updated)?;
        self.log(&WalRecord::PutSubmodel {
            submodel: updated.clone(),
        })?;
        state.submodels.insert(updated.id.clone(), updated.clone());
        self.announce(Change::Submodel {
            action: Action::Updated,
            submodel: updated.clone(),
        });
        Ok(updated)
    }

    /// Replaces one property value; the write lands on the local copy when
    /// `submodel_id` names a remote submodel.
    pub fn patch_property_value(
        &self,
        role: Role,
        submodel_id: &Identifier,
        path: &str,
        new_value: &str,
    ) -> Result<Submodel, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Patch)?;
        self.mutate_submodel(submodel_id, |sm| match sm.element_mut(path) {
            Some(SubmodelElement::Property { value_type, value, .. }) => {
                if !value_type.accepts(new_value) {
                    return Err(RepoError::TypeMismatch(format!(
                        "{new_value:?} is not a valid {value_type:?} for {path}"
                    )));
                }
                *value = new_value.to_string();
                Ok(())
            }
            _ => Err(RepoError::PathNotFound(path.to_string())),
        })
    }

    pub fn put_file_attachment(
        &self,
        role: Role,
        submodel_id: &Identifier,
        path: &str,
        bytes: &[u8],
        new_content_type: &str,
    ) -> Result<Digest, RepoError> {
        AccessPolicy::for_role(role).check(Verb::Put)?;
        let digest = Digest::of(bytes);
        let is_attachment = |sm: &Submodel| matches!(sm.element(path), Some(SubmodelElement::FileAttachment { .. }));
        let (target, _) = self.resolve_for_write(submodel_id)?;
        {
            let state = self.state.read();
            let sm = state
                .submodels
                .get(&target)
                .ok_or_else(|| RepoError::NotFound(target.to_string()))?;
            if !is_attachment(sm) {
                return Err(RepoError::PathNotFound(path.to_string()));
            }
        }
        self.store_blob(bytes)?;
        self.mutate_submodel(&target, |sm| match sm.element_mut(path) {
            Some(SubmodelElement::FileAttachment {
                content_type,
                digest: d,
                length,
                ..
            }) => {
                *content_type = new_content_type.to_string();
                *d = Some(digest);
                *length = bytes.len() as u64;
                Ok(())
            }
            _ => Err(RepoError::PathNotFound(path.to_string())),
        })?;
        Ok(digest)
    }

    pub fn get_file_attachment(
        &self,
        role: Role,
        submodel_id: &Identifier,
        path: &str,
    ) -> Result<(String, Arc<Vec<u8>>), RepoError> {
        let sm = self.get_submodel(role, submodel_id)?;
        match sm.element(path) {
            Some(SubmodelElement::FileAttachment {
                content_type,
                digest: Some(d),
                ..
            }) => {
                let blob = self.blob(d).ok_or_else(|| RepoError::NotFound(format!("blob {d}")))?;
                Ok((content_type.clone(), blob))
            }
            Some(SubmodelElement::FileAttachment { .. }) => Err(RepoError::NotFound(format!("{path}: no content"))),
            _ => Err(RepoError::PathNotFound(path.to_string())),
        }
    }

    // ---- blobs ----

    /// Content-addressed; storing the same bytes twice keeps one copy.
    pub fn store_blob(&self, bytes: &[u8]) -> Result<Digest, RepoError> {
        let digest = Digest::of(bytes);
        let mut blobs = self.blobs.write();
        if let std::collections::hash_map::Entry::Vacant(slot) = blobs.entry(digest) {
            self.log(&WalRecord::PutBlob {
                digest,
                data: STANDARD.encode(bytes),
            })?;
            slot.insert(Arc::new(bytes.to_vec()));
        }
        Ok(digest)
    }

    pub fn blob(&self, digest: &Digest) -> Option<Arc<Vec<u8>>> {
        self.blobs.read().get(digest).cloned()
    }

    pub fn blob_count(&self) -> usize {
        self.blobs.read().len()
    }

    // ---- snapshot support ----

    /// Consistent copy of the live state.
    pub fn live_state(&self) -> (Vec<Shell>, Vec<Submodel>) {
        let state = self.state.read();
        (
            state.shells.values().cloned().collect(),
            state.submodels.values().cloned().collect(),
        )
    }

    /// Replaces the live state wholesale, announcing every entity that
    /// changed. Refused while a [`MutationGuard`] is alive.
    pub fn restore(&self, shells: Vec<Shell>, submodels: Vec<Submodel>) -> Result<usize, RepoError> {
        if self.in_flight.load(Ordering::SeqCst) > 0 {
            return Err(RepoError::DirtyCheckout);
        }
        for s in &shells {
            s.validate()?;
        }
        for s in &submodels {
            s.validate()?;
        }
        let mut state = self.state.write();
        if self.in_flight.load(Ordering::SeqCst) > 0 {
            return Err(RepoError::DirtyCheckout);
        }
        self.log(&WalRecord::Restore {
            shells: shells.clone(),
            submodels: submodels.clone(),
        })?;
        let old = std::mem::take(&mut *state);
        let new_shells: BTreeMap<_, _> = shells.into_iter().map(|s| (s.id.clone(), s)).collect();
        let new_submodels: BTreeMap<_, _> = submodels.into_iter().map(|s| (s.id.clone(), s)).collect();
        state.shells = new_shells.clone();
        state.submodels = new_submodels.clone();
        let mut changes = Vec::new();
        for (action, shell) in diff_maps(&old.shells, &new_shells) {
            changes.push(Change::Shell { action, shell });
        }
        for (action, submodel) in diff_maps(&old.submodels, &new_submodels) {
            changes.push(Change::Submodel { action, submodel });
        }
        let n = changes.len();
        for c in changes {
            self.announce(c);
        }
        Ok(n)
    }

    pub fn set_stable(&self, stable: StableSet) {
        *self.stable.write() = Some(stable);
    }

    pub fn stable_commit(&self) -> Option<Digest> {
        self.stable.read().as_ref().and_then(|s| s.commit_id)
    }
}

fn diff_maps<T: Entity + PartialEq>(
    old: &BTreeMap<Identifier, T>,
    new: &BTreeMap<Identifier, T>,
) -> Vec<(Action, T)> {
    let mut out = Vec::new();
    for (id, e) in new {
        match old.get(id) {
            None => out.push((Action::Created, e.clone())),
            Some(o) if o != e => out.push((Action::Updated, e.clone())),
            _ => {}
        }
    }
    for (id, e) in old {
        if !new.contains_key(id) {
            out.push((Action::Deleted, e.clone()));
        }
    }
    out
}

fn apply_record(
    state: &mut RepoState,
    blobs: &mut HashMap<Digest, Arc<Vec<u8>>>,
    record: WalRecord,
) -> Result<(), RepoError> {
    match record {
        WalRecord::PutShell { shell } => {
            state.shells.insert(shell.id.clone(), shell);
        }
        WalRecord::PutSubmodel { submodel } => {
            state.submodels.insert(submodel.id.clone(), submodel);
        }
        WalRecord::DeleteShell { id } => {
            state.shells.remove(&id);
        }
        WalRecord::DeleteSubmodel { id } => {
            state.submodels.remove(&id);
        }
        WalRecord::PutBlob { digest, data } => {
            let bytes = STANDARD.decode(data).map_err(|e| RepoError::Storage(e.to_string()))?;
            if Digest::of(&bytes) != digest {
                return Err(RepoError::Storage(format!("blob {digest} fails its digest check")));
            }
            blobs.insert(digest, Arc::new(bytes));
        }
        WalRecord::Restore { shells, submodels } => {
            state.shells = shells.into_iter().map(|s| (s.id.clone(), s)).collect();
            state.submodels = submodels.into_iter().map(|s| (s.id.clone(), s)).collect();
        }
    }
    Ok(())
}

fn decode_cursor(cursor: Option<&str>) -> Result<Option<Identifier>, RepoError> {
    match cursor {
        None | Some("") => Ok(None),
        Some(c) => Identifier::from_path(c)
            .map(Some)
            .map_err(|_| RepoError::NotFound(format!("cursor {c:?}"))),
    }
}

fn paginate<T: Clone>(map: &BTreeMap<Identifier, T>, after: Option<&Identifier>, limit: usize) -> Page<T> {
    use std::ops::Bound;
    let limit = limit.max(1);
    let lower = match after {
        Some(a) => Bound::Excluded(a.clone()),
        None => Bound::Unbounded,
    };
    let mut iter = map.range((lower, Bound::Unbounded));
    let mut items = Vec::new();
    let mut last = None;
    for (k, v) in iter.by_ref().take(limit) {
        items.push(v.clone());
        last = Some(k.clone());
    }
    let next_cursor = match (iter.next(), last) {
        (Some(_), Some(l)) => Some(URL_SAFE_NO_PAD.encode(l.as_str())),
        _ => None,
    };
    Page { items, next_cursor }
}
