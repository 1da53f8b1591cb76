//! Deterministic replay: a directory of recorded (request-digest, response)
//! entries, a backend that serves only from it, and a recording wrapper that
//! fills it from another backend.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// On-disk store of recorded responses, one JSON file per request digest.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    dir: PathBuf,
}

impl ReplayStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::StoreWrite(e.to_string()))?;
        Ok(ReplayStore { dir })
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<ChatResponse>, BackendError> {
        let path = self.entry_path(digest);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| BackendError::StoreWrite(e.to_string()))?;
        let response =
            serde_json::from_str(&text).map_err(|e| BackendError::StoreWrite(e.to_string()))?;
        Ok(Some(response))
    }

    /// Inserts or overwrites the entry for `digest`.
    pub fn put(&self, digest: &str, response: &ChatResponse) -> Result<(), BackendError> {
        let text = serde_json::to_string_pretty(response)
            .map_err(|e| BackendError::StoreWrite(e.to_string()))?;
        fs::write(self.entry_path(digest), text)
            .map_err(|e| BackendError::StoreWrite(e.to_string()))
    }

    pub fn len(&self) -> Result<usize, BackendError> {
        count_entries(&self.dir)
    }

    pub fn is_empty(&self) -> Result<bool, BackendError> {
        Ok(self.len()? == 0)
    }
}

fn count_entries(dir: &Path) -> Result<usize, BackendError> {
    let mut n = 0;
    for entry in fs::read_dir(dir).map_err(|e| BackendError::StoreWrite(e.to_string()))? {
        let entry = entry.map_err(|e| BackendError::StoreWrite(e.to_string()))?;
        if entry.path().extension().is_some_and(|e| e == "json") {
            n += 1;
        }
    }
    Ok(n)
}

/// Serves recorded responses only; a miss is an error, never a live call.
pub struct ReplayBackend {
    store: ReplayStore,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore) -> Self {
        ReplayBackend { store }
    }
}

impl ChatBackend for ReplayBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let digest = request.digest();
        match self.store.get(&digest)? {
            Some(response) => Ok(response),
            None => Err(BackendError::ReplayMiss { digest }),
        }
    }
}

/// Passes calls through and persists every (digest, response) pair.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    store: ReplayStore,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, store: ReplayStore) -> Self {
        RecordingBackend { inner, store }
    }
}

impl ChatBackend for RecordingBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.chat(request)?;
        self.store.put(&request.digest(), &response)?;
        Ok(response)
    }
}
