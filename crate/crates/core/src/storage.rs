//! Pluggable load/store backends addressed by `backend://key` references.
//!
//! Object backends overwrite by key. Queue backends append per key and
//! `load` pops the oldest unconsumed object.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use parking_lot::Mutex;
use reqwest::{StatusCode, Url};
use thiserror::Error;

use crate::clock::Clock;
use crate::metrics::{MetricSpan, SpanContext, SpanKind};
use crate::template::StorageRef;

/// Default byte budget of an in-memory object store: 256 MiB.
pub const DEFAULT_MEMORY_BUDGET: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataObject {
    pub key: String,
    pub bytes: Vec<u8>,
    /// Milliseconds since the unix epoch (or the simulated epoch).
    pub created_at: u64,
}

impl DataObject {
    pub fn new(key: impl Into<String>, bytes: Vec<u8>, created_at: u64) -> Self {
        DataObject {
            key: key.into(),
            bytes,
            created_at,
        }
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Object,
    Queue,
}

/// Failure reported by a backend, before the registry attaches names.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("not found")]
    NotFound,
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("capacity of {budget} bytes exceeded")]
    CapacityExceeded { budget: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("backend `{name}` unavailable: {cause}")]
    BackendUnavailable { name: String, cause: String },
    #[error("backend `{name}` exceeded its {budget} byte budget")]
    CapacityExceeded { name: String, budget: u64 },
    #[error("`{0}` not found")]
    NotFound(String),
}

impl StorageError {
    fn from_backend(r: &StorageRef, e: BackendError) -> Self {
        match e {
            BackendError::NotFound => StorageError::NotFound(r.to_string()),
            BackendError::Unavailable(cause) => StorageError::BackendUnavailable {
                name: r.backend().to_string(),
                cause,
            },
            BackendError::CapacityExceeded { budget } => StorageError::CapacityExceeded {
                name: r.backend().to_string(),
                budget,
            },
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Returns the stored size.
    async fn store(&self, key: &str, obj: DataObject) -> Result<u64, BackendError>;

    async fn load(&self, key: &str) -> Result<DataObject, BackendError>;
}

/// In-memory object store with a byte budget.
pub struct MemoryStore {
    budget: u64,
    inner: Mutex<(HashMap<String, DataObject>, u64)>,
}

impl Default for MemoryStore {
    fn default() -> Self {
        MemoryStore::new(DEFAULT_MEMORY_BUDGET)
    }
}

impl MemoryStore {
    pub fn new(budget: u64) -> Self {
        MemoryStore {
            budget,
            inner: Mutex::new((HashMap::new(), 0)),
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.lock().1
    }
}

#[async_trait]
impl Backend for MemoryStore {
    fn kind(&self) -> BackendKind {
        BackendKind::Object
    }

    async fn store(&self, key: &str, obj: DataObject) -> Result<u64, BackendError> {
        let mut guard = self.inner.lock();
        let (map, used) = &mut *guard;
        let size = obj.size();
        let replaced = map.get(key).map_or(0, DataObject::size);
        let after = *used - replaced + size;
        if after > self.budget {
            return Err(BackendError::CapacityExceeded { budget: self.budget });
        }
        *used = after;
        map.insert(key.to_string(), obj);
        Ok(size)
    }

    async fn load(&self, key: &str) -> Result<DataObject, BackendError> {
        self.inner.lock().0.get(key).cloned().ok_or(BackendError::NotFound)
    }
}

/// Per-key FIFO queue; `load` consumes.
#[derive(Default)]
pub struct QueueStore {
    queues: Mutex<HashMap<String, VecDeque<DataObject>>>,
}

impl QueueStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self, key: &str) -> usize {
        self.queues.lock().get(key).map_or(0, VecDeque::len)
    }
}

#[async_trait]
impl Backend for QueueStore {
    fn kind(&self) -> BackendKind {
        BackendKind::Queue
    }

    async fn store(&self, key: &str, obj: DataObject) -> Result<u64, BackendError> {
        let size = obj.size();
        self.queues.lock().entry(key.to_string()).or_default().push_back(obj);
        Ok(size)
    }

    async fn load(&self, key: &str) -> Result<DataObject, BackendError> {
        self.queues
            .lock()
            .get_mut(key)
            .and_then(VecDeque::pop_front)
            .ok_or(BackendError::NotFound)
    }
}

const TMP_DIR: &str = ".tmp";

/// Object store keeping one file per key under a root directory.
pub struct FileStore {
    root: PathBuf,
    writes: AtomicU64,
}

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(TMP_DIR))?;
        Ok(FileStore {
            root,
            writes: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let mut name = String::with_capacity(key.len());
        for (i, b) in key.bytes().enumerate() {
            // A leading dot is escaped so `.`, `..` and the temp dir stay out
            // of the key space.
            if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || (b == b'.' && i > 0) {
                name.push(b as char);
            } else {
                name.push_str(&format!("%{b:02X}"));
            }
        }
        self.root.join(name)
    }
}

#[async_trait]
impl Backend for FileStore {
    fn kind(&self) -> BackendKind {
        BackendKind::Object
    }

    async fn store(&self, key: &str, obj: DataObject) -> Result<u64, BackendError> {
        let path = self.path_for(key);
        let n = self.writes.fetch_add(1, Ordering::Relaxed);
        let tmp = self.root.join(TMP_DIR).join(format!("{}-{n}", std::process::id()));
        let io = |e: std::io::Error| BackendError::Unavailable(e.to_string());
        fs::write(&tmp, &obj.bytes).map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)?;
        Ok(obj.size())
    }

    async fn load(&self, key: &str) -> Result<DataObject, BackendError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => {
                let created_at = fs::metadata(&path)
                    .and_then(|m| m.modified())
                    .ok()
                    .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
                    .map_or(0, |d| d.as_millis() as u64);
                Ok(DataObject::new(key, bytes, created_at))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(BackendError::NotFound),
            Err(e) => Err(BackendError::Unavailable(e.to_string())),
        }
    }
}

/// Client for the data endpoints a gateway serves (`/data/{key}` for
/// objects, `/queue/{key}` for queues).
pub struct RemoteStore {
    base: Url,
    kind: BackendKind,
    client: reqwest::Client,
}

impl RemoteStore {
    pub fn new(base: &str, kind: BackendKind) -> Result<Self, BackendError> {
        let base = Url::parse(base).map_err(|e| BackendError::Unavailable(format!("bad url `{base}`: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(BackendError::Unavailable(format!("bad url `{base}`")));
        }
        Ok(RemoteStore {
            base,
            kind,
            client: reqwest::Client::new(),
        })
    }

    fn url(&self, key: &str) -> Url {
        let mut url = self.base.clone();
        let collection = match self.kind {
            BackendKind::Object => "data",
            BackendKind::Queue => "queue",
        };
        if let Ok(mut segs) = url.path_segments_mut() {
            segs.pop_if_empty().push(collection).push(key);
        }
        url
    }
}

fn unavailable(e: reqwest::Error) -> BackendError {
    BackendError::Unavailable(e.to_string())
}

fn now_epoch_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[async_trait]
impl Backend for RemoteStore {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    async fn store(&self, key: &str, obj: DataObject) -> Result<u64, BackendError> {
        let req = match self.kind {
            BackendKind::Object => self.client.put(self.url(key)),
            BackendKind::Queue => self.client.post(self.url(key)),
        };
        let resp = req.body(obj.bytes).send().await.map_err(unavailable)?;
        match resp.status() {
            StatusCode::OK => {
                let body: serde_json::Value = resp.json().await.map_err(unavailable)?;
                body["size"]
                    .as_u64()
                    .ok_or_else(|| BackendError::Unavailable("malformed store response".into()))
            }
            StatusCode::INSUFFICIENT_STORAGE => Err(BackendError::CapacityExceeded { budget: 0 }),
            s => Err(BackendError::Unavailable(format!("status {s}"))),
        }
    }

    async fn load(&self, key: &str) -> Result<DataObject, BackendError> {
        let req = match self.kind {
            BackendKind::Object => self.client.get(self.url(key)),
            BackendKind::Queue => self.client.delete(self.url(key)),
        };
        let resp = req.send().await.map_err(unavailable)?;
        match resp.status() {
            StatusCode::OK => {
                let bytes = resp.bytes().await.map_err(unavailable)?;
                Ok(DataObject::new(key, bytes.to_vec(), now_epoch_ms()))
            }
            StatusCode::NOT_FOUND => Err(BackendError::NotFound),
            s => Err(BackendError::Unavailable(format!("status {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("backend `{0}` registered twice")]
pub struct DuplicateBackend(pub String);

/// Named backends available to a run.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    entries: BTreeMap<String, Arc<dyn Backend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, backend: Arc<dyn Backend>) -> Result<(), DuplicateBackend> {
        if self.entries.contains_key(name) {
            return Err(DuplicateBackend(name.to_string()));
        }
        self.entries.insert(name.to_string(), backend);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn kind(&self, name: &str) -> Option<BackendKind> {
        self.entries.get(name).map(|b| b.kind())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn backend(&self, r: &StorageRef) -> Result<&Arc<dyn Backend>, StorageError> {
        self.entries
            .get(r.backend())
            .ok_or_else(|| StorageError::UnknownBackend(r.backend().to_string()))
    }

    pub async fn store(&self, r: &StorageRef, obj: DataObject) -> Result<u64, StorageError> {
        let backend = self.backend(r)?;
        backend
            .store(r.key(), obj)
            .await
            .map_err(|e| StorageError::from_backend(r, e))
    }

    pub async fn load(&self, r: &StorageRef) -> Result<DataObject, StorageError> {
        let backend = self.backend(r)?;
        backend
            .load(r.key())
            .await
            .map_err(|e| StorageError::from_backend(r, e))
    }

    /// [`store`](Self::store) plus a Store span carrying the object size.
    pub async fn timed_store(
        &self,
        r: &StorageRef,
        obj: DataObject,
        clock: &dyn Clock,
        ctx: &SpanContext,
    ) -> (Result<u64, StorageError>, MetricSpan) {
        let size = obj.size();
        let start = clock.now_ms();
        let result = self.store(r, obj).await;
        let span = MetricSpan::between(SpanKind::Store, ctx, start, clock.now_ms())
            .with_size(size)
            .with_label("ref", r.to_string());
        let span = match &result {
            Ok(_) => span,
            Err(e) => span.fail(e),
        };
        (result, span)
    }

    /// [`load`](Self::load) plus a Load span carrying the object size.
    pub async fn timed_load(
        &self,
        r: &StorageRef,
        clock: &dyn Clock,
        ctx: &SpanContext,
    ) -> (Result<DataObject, StorageError>, MetricSpan) {
        let start = clock.now_ms();
        let result = self.load(r).await;
        let span = MetricSpan::between(SpanKind::Load, ctx, start, clock.now_ms()).with_label("ref", r.to_string());
        let span = match &result {
            Ok(obj) => span.with_size(obj.size()),
            Err(e) => span.with_size(0).fail(e),
        };
        (result, span)
    }
}
