use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, GatewayError};

/// One stored response, written to `{dir}/{fingerprint}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub request: CompletionRequest,
    pub text: String,
    pub timestamp: u64,
    pub backend_id: String,
}

/// Content-addressed response store. Always keeps an in-memory index; with a
/// directory, records are also persisted one file per fingerprint and never
/// rewritten.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, String>>,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            dir: None,
            memory: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            dir: Some(dir),
            ..ResponseCache::in_memory()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn record_path(&self, fingerprint: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{fingerprint}.json")))
    }

    pub fn get(&self, fingerprint: &str) -> Result<Option<String>, GatewayError> {
        if let Some(text) = self
            .memory
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(fingerprint)
        {
            return Ok(Some(text.clone()));
        }
        let Some(path) = self.record_path(fingerprint) else {
            return Ok(None);
        };
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        };
        let record: CacheRecord = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
        self.memory
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(fingerprint.to_owned(), record.text.clone());
        Ok(Some(record.text))
    }

    pub fn put(
        &self,
        fingerprint: &str,
        request: &CompletionRequest,
        backend_id: &str,
        text: &str,
    ) -> Result<(), GatewayError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = self.record_path(fingerprint) {
            if !path.exists() {
                let record = CacheRecord {
                    request: request.clone(),
                    text: text.to_owned(),
                    timestamp: SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0),
                    backend_id: backend_id.to_owned(),
                };
                let body = serde_json::to_vec_pretty(&record).expect("record serializes");
                // Write-then-rename so a crash never leaves a torn record.
                let tmp = path.with_extension("json.tmp");
                std::fs::write(&tmp, body)
                    .and_then(|_| std::fs::rename(&tmp, &path))
                    .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))?;
            }
        }
        self.memory
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(fingerprint.to_owned(), text.to_owned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
