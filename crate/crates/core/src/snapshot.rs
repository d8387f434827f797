//! Content-addressed snapshots of a repository's state.
//!
//! Entities are stored by the digest of their canonical bytes, blobs by the
//! digest of their content. A commit maps entry keys to digests and is
//! itself addressed by the digest of its canonical body.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::model::{canonical_json, Digest, Entity, EntityKind, Identifier, Shell, Submodel, SubmodelElement};
use crate::repository::{RepoError, Repository, StableSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SnapshotError {
    #[error("unknown commit {0}")]
    UnknownCommit(String),
    #[error("missing object {0}")]
    MissingObject(Digest),
    #[error("unknown object store backend {0:?}")]
    UnknownBackend(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

fn io_err(e: impl std::fmt::Display) -> SnapshotError {
    SnapshotError::Storage(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SnapshotCommit {
    pub commit_id: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub created_at: Timestamp,
    pub entries: BTreeMap<String, Digest>,
    pub message: String,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CommitBody<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    parent: &'a Option<Digest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tag: &'a Option<String>,
    created_at: Timestamp,
    entries: &'a BTreeMap<String, Digest>,
    message: &'a str,
}

impl SnapshotCommit {
    fn body_digest(&self) -> Digest {
        let body = CommitBody {
            parent: &self.parent,
            tag: &self.tag,
            created_at: self.created_at,
            entries: &self.entries,
            message: &self.message,
        };
        let value = serde_json::to_value(&body).expect("commit body serializes");
        Digest::of(&canonical_json(&value))
    }

    pub fn verify(&self) -> bool {
        self.body_digest() == self.commit_id
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(&serde_json::to_value(self).expect("commit serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Shell,
    Submodel,
    Blob,
}

impl EntryKind {
    fn prefix(self) -> &'static str {
        match self {
            EntryKind::Shell => "shell",
            EntryKind::Submodel => "submodel",
            EntryKind::Blob => "blob",
        }
    }

    fn of(kind: EntityKind) -> Self {
        match kind {
            EntityKind::Shell => EntryKind::Shell,
            EntityKind::Submodel => EntryKind::Submodel,
        }
    }
}

fn entry_key(kind: EntryKind, id: &str) -> String {
    format!("{}/{id}", kind.prefix())
}

fn split_key(key: &str) -> Option<(EntryKind, &str)> {
    let (prefix, id) = key.split_once('/')?;
    let kind = match prefix {
        "shell" => EntryKind::Shell,
        "submodel" => EntryKind::Submodel,
        "blob" => EntryKind::Blob,
        _ => return None,
    };
    Some((kind, id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiffEntry {
    pub kind: EntryKind,
    pub entity_id: String,
    pub change: ChangeKind,
}

/// Computed purely from the two entry maps.
pub fn diff_commits(a: &SnapshotCommit, b: &SnapshotCommit) -> Vec<DiffEntry> {
    let keys: BTreeSet<&String> = a.entries.keys().chain(b.entries.keys()).collect();
    keys.into_iter()
        .filter_map(|key| {
            let change = match (a.entries.get(key), b.entries.get(key)) {
                (None, Some(_)) => ChangeKind::Added,
                (Some(_), None) => ChangeKind::Removed,
                (Some(x), Some(y)) if x != y => ChangeKind::Modified,
                _ => return None,
            };
            let (kind, id) = split_key(key)?;
            Some(DiffEntry {
                kind,
                entity_id: id.to_string(),
                change,
            })
        })
        .collect()
}

/// Backend holding objects, commits and named refs.
pub trait ObjectStore: Send + Sync {
    fn put_object(&self, bytes: &[u8]) -> Result<Digest, SnapshotError>;
    fn get_object(&self, digest: &Digest) -> Result<Option<Vec<u8>>, SnapshotError>;
    fn put_commit(&self, commit: &SnapshotCommit) -> Result<(), SnapshotError>;
    fn get_commit(&self, id: &Digest) -> Result<Option<SnapshotCommit>, SnapshotError>;
    fn list_commits(&self) -> Result<Vec<SnapshotCommit>, SnapshotError>;
    fn read_ref(&self, name: &str) -> Result<Option<Digest>, SnapshotError>;
    fn write_ref(&self, name: &str, digest: &Digest) -> Result<(), SnapshotError>;
}

#[derive(Default)]
pub struct MemoryObjectStore {
    objects: RwLock<HashMap<Digest, Vec<u8>>>,
    commits: RwLock<BTreeMap<Digest, SnapshotCommit>>,
    refs: RwLock<BTreeMap<String, Digest>>,
}

impl ObjectStore for MemoryObjectStore {
    fn put_object(&self, bytes: &[u8]) -> Result<Digest, SnapshotError> {
        let d = Digest::of(bytes);
        self.objects.write().entry(d).or_insert_with(|| bytes.to_vec());
        Ok(d)
    }
    fn get_object(&self, digest: &Digest) -> Result<Option<Vec<u8>>, SnapshotError> {
        Ok(self.objects.read().get(digest).cloned())
    }
    fn put_commit(&self, commit: &SnapshotCommit) -> Result<(), SnapshotError> {
        self.commits.write().insert(commit.commit_id, commit.clone());
        Ok(())
    }
    fn get_commit(&self, id: &Digest) -> Result<Option<SnapshotCommit>, SnapshotError> {
        Ok(self.commits.read().get(id).cloned())
    }
    fn list_commits(&self) -> Result<Vec<SnapshotCommit>, SnapshotError> {
        Ok(self.commits.read().values().cloned().collect())
    }
    fn read_ref(&self, name: &str) -> Result<Option<Digest>, SnapshotError> {
        Ok(self.refs.read().get(name).copied())
    }
    fn write_ref(&self, name: &str, digest: &Digest) -> Result<(), SnapshotError> {
        self.refs.write().insert(name.to_string(), *digest);
        Ok(())
    }
}

/// On-disk layout: `objects/{digest}`, `commits/{commitId}.json`, `refs/{name}`.
pub struct FsObjectStore {
    root: PathBuf,
}

impl FsObjectStore {
    pub fn open(root: &Path) -> Result<Self, SnapshotError> {
        for sub in ["objects", "commits", "refs"] {
            fs::create_dir_all(root.join(sub)).map_err(io_err)?;
        }
        Ok(FsObjectStore {
            root: root.to_path_buf(),
        })
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), SnapshotError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }
}

impl ObjectStore for FsObjectStore {
    fn put_object(&self, bytes: &[u8]) -> Result<Digest, SnapshotError> {
        let d = Digest::of(bytes);
        let path = self.root.join("objects").join(d.to_hex());
        if !path.exists() {
            self.write_atomic(&path, bytes)?;
        }
        Ok(d)
    }

    fn get_object(&self, digest: &Digest) -> Result<Option<Vec<u8>>, SnapshotError> {
        match fs::read(self.root.join("objects").join(digest.to_hex())) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(e)),
        }
    }

    fn put_commit(&self, commit: &SnapshotCommit) -> Result<(), SnapshotError> {
        let path = self.root.join("commits").join(format!("{}.json", commit.commit_id));
        self.write_atomic(&path, &commit.canonical_bytes())
    }

    fn get_commit(&self, id: &Digest) -> Result<Option<SnapshotCommit>, SnapshotError> {
        match fs::read(self.root.join("commits").join(format!("{id}.json"))) {
            Ok(b) => serde_json::from_slice(&b).map(Some).map_err(io_err),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(e)),
        }
    }

    fn list_commits(&self) -> Result<Vec<SnapshotCommit>, SnapshotError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("commits")).map_err(io_err)? {
            let path = entry.map_err(io_err)?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                let bytes = fs::read(&path).map_err(io_err)?;
                out.push(serde_json::from_slice(&bytes).map_err(io_err)?);
            }
        }
        Ok(out)
    }

    fn read_ref(&self, name: &str) -> Result<Option<Digest>, SnapshotError> {
        match fs::read_to_string(self.root.join("refs").join(name)) {
            Ok(s) => s.trim().parse().map(Some).map_err(io_err),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(e)),
        }
    }

    fn write_ref(&self, name: &str, digest: &Digest) -> Result<(), SnapshotError> {
        self.write_atomic(&self.root.join("refs").join(name), digest.to_hex().as_bytes())
    }
}

pub type ObjectStoreFactory = fn(&Path) -> Result<Arc<dyn ObjectStore>, SnapshotError>;

/// Object-store backends selectable by name (`memory`, `fs`).
pub struct ObjectStoreRegistry {
    factories: BTreeMap<&'static str, ObjectStoreFactory>,
}

impl Default for ObjectStoreRegistry {
    fn default() -> Self {
        let mut r = ObjectStoreRegistry {
            factories: BTreeMap::new(),
        };
        r.register("memory", |_| Ok(Arc::new(MemoryObjectStore::default())));
        r.register("fs", |root| Ok(Arc::new(FsObjectStore::open(root)?)));
        r
    }
}

impl ObjectStoreRegistry {
    pub fn register(&mut self, name: &'static str, factory: ObjectStoreFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn open(&self, name: &str, root: &Path) -> Result<Arc<dyn ObjectStore>, SnapshotError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| SnapshotError::UnknownBackend(name.to_string()))?;
        factory(root)
    }
}

const HEAD: &str = "HEAD";
const STABLE: &str = "STABLE";

/// Decoded content of one commit.
#[derive(Debug, Clone, Default)]
pub struct CommitState {
    pub shells: Vec<Shell>,
    pub submodels: Vec<Submodel>,
    pub blobs: Vec<Vec<u8>>,
}

pub struct SnapshotStore {
    store: Arc<dyn ObjectStore>,
    lock: Mutex<()>,
}

impl SnapshotStore {
    pub fn new(store: Arc<dyn ObjectStore>) -> Self {
        SnapshotStore {
            store,
            lock: Mutex::new(()),
        }
    }

    pub fn in_memory() -> Self {
        SnapshotStore::new(Arc::new(MemoryObjectStore::default()))
    }

    pub fn backend(&self) -> &Arc<dyn ObjectStore> {
        &self.store
    }

    pub fn head(&self) -> Result<Option<Digest>, SnapshotError> {
        self.store.read_ref(HEAD)
    }

    pub fn stable(&self) -> Result<Option<Digest>, SnapshotError> {
        self.store.read_ref(STABLE)
    }

    pub fn set_stable(&self, id: &Digest) -> Result<(), SnapshotError> {
        self.store.write_ref(STABLE, id)
    }

    pub fn commit(
        &self,
        repo: &Repository,
        tag: Option<String>,
        message: &str,
        now: Timestamp,
    ) -> Result<SnapshotCommit, SnapshotError> {
        let _serial = self.lock.lock();
        let (shells, submodels) = repo.live_state();
        let mut entries = BTreeMap::new();
        for s in &shells {
            let d = self.store.put_object(&s.canonicalize().map_err(RepoError::from)?)?;
            entries.insert(entry_key(EntryKind::of(Shell::KIND), s.id.as_str()), d);
        }
        let mut blob_digests = BTreeSet::new();
        for sm in &submodels {
            let d = self.store.put_object(&sm.canonicalize().map_err(RepoError::from)?)?;
            entries.insert(entry_key(EntryKind::of(Submodel::KIND), sm.id.as_str()), d);
            collect_blobs(&sm.elements, &mut blob_digests);
        }
        for d in blob_digests {
            let bytes = repo.blob(&d).ok_or(SnapshotError::MissingObject(d))?;
            self.store.put_object(&bytes)?;
            entries.insert(entry_key(EntryKind::Blob, &d.to_hex()), d);
        }
        let mut commit = SnapshotCommit {
            commit_id: Digest([0; 32]),
            parent: self.store.read_ref(HEAD)?,
            tag,
            created_at: now,
            entries,
            message: message.to_string(),
        };
        commit.commit_id = commit.body_digest();
        self.store.put_commit(&commit)?;
        self.store.write_ref(HEAD, &commit.commit_id)?;
        Ok(commit)
    }

    pub fn get(&self, id: &Digest) -> Result<SnapshotCommit, SnapshotError> {
        self.store
            .get_commit(id)?
            .ok_or_else(|| SnapshotError::UnknownCommit(id.to_hex()))
    }

    pub fn list(&self) -> Result<Vec<SnapshotCommit>, SnapshotError> {
        let mut all = self.store.list_commits()?;
        all.sort_by_key(|c| (c.created_at, c.commit_id));
        Ok(all)
    }

    pub fn diff(&self, a: &Digest, b: &Digest) -> Result<Vec<DiffEntry>, SnapshotError> {
        Ok(diff_commits(&self.get(a)?, &self.get(b)?))
    }

    pub fn load(&self, id: &Digest) -> Result<CommitState, SnapshotError> {
        let commit = self.get(id)?;
        let mut state = CommitState::default();
        for (key, digest) in &commit.entries {
            let bytes = self
                .store
                .get_object(digest)?
                .ok_or(SnapshotError::MissingObject(*digest))?;
            match split_key(key).map(|(k, _)| k) {
                Some(EntryKind::Shell) => state.shells.push(Shell::parse_canonical(&bytes).map_err(RepoError::from)?),
                Some(EntryKind::Submodel) => {
                    state.submodels.push(Submodel::parse_canonical(&bytes).map_err(RepoError::from)?)
                }
                Some(EntryKind::Blob) => state.blobs.push(bytes),
                None => return Err(SnapshotError::Storage(format!("bad entry key {key:?}"))),
            }
        }
        Ok(state)
    }

    /// Restores the repository to `id` byte-exactly; returns the number of
    /// entities that changed (each announced as an event).
    pub fn checkout(&self, repo: &Repository, id: &Digest) -> Result<usize, SnapshotError> {
        let state = self.load(id)?;
        for b in &state.blobs {
            repo.store_blob(b)?;
        }
        let n = repo.restore(state.shells, state.submodels)?;
        self.store.write_ref(HEAD, id)?;
        Ok(n)
    }

    pub fn stable_set(&self, id: &Digest) -> Result<(StableSet, Vec<Vec<u8>>), SnapshotError> {
        let state = self.load(id)?;
        let set = StableSet {
            commit_id: Some(*id),
            shells: state.shells.into_iter().map(|s| (s.id.clone(), s)).collect(),
            submodels: state.submodels.into_iter().map(|s| (s.id.clone(), s)).collect(),
        };
        Ok((set, state.blobs))
    }
}

fn collect_blobs(elements: &[SubmodelElement], out: &mut BTreeSet<Digest>) {
    for e in elements {
        match e {
            SubmodelElement::FileAttachment { digest: Some(d), .. } => {
                out.insert(*d);
            }
            SubmodelElement::Collection { elements, .. } => collect_blobs(elements, out),
            _ => {}
        }
    }
}

/// Entity ids mentioned by a diff, for callers that only care about entities.
pub fn touched_entities(diff: &[DiffEntry]) -> Vec<(EntryKind, Identifier)> {
    diff.iter()
        .filter(|d| d.kind != EntryKind::Blob)
        .filter_map(|d| Identifier::new(d.entity_id.clone()).ok().map(|id| (d.kind, id)))
        .collect()
}
