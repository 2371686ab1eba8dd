use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BackendError;

/// One cached chat call: the canonical request and every raw response body
/// that was needed to produce its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: serde_json::Value,
    pub responses: Vec<serde_json::Value>,
}

/// Content-addressed response cache: one JSON file per request digest.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        std::fs::create_dir_all(dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path_for(&self, key: &[u8; 32]) -> PathBuf {
        self.dir.join(format!("{}.json", hex::encode(key)))
    }

    /// A missing or unreadable entry is a miss.
    pub fn get(&self, key: &[u8; 32]) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(entry) => Some(entry),
            Err(e) => {
                tracing::warn!(key = %hex::encode(key), "ignoring unreadable cache entry: {e}");
                None
            }
        }
    }

    /// Write to a temp file in the cache dir, then rename over the final name.
    pub fn put(&self, key: &[u8; 32], entry: &CacheEntry) -> Result<(), BackendError> {
        let err = |e: &dyn std::fmt::Display| BackendError::Cache(e.to_string());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| err(&e))?;
        serde_json::to_writer(&mut tmp, entry).map_err(|e| err(&e))?;
        tmp.flush().map_err(|e| err(&e))?;
        tmp.persist(self.path_for(key)).map_err(|e| err(&e))?;
        Ok(())
    }
}
