//! Content-addressed response cache.
//!
//! One file per key under `<cache_root>/<backend_id>/<hex digest>.json`.
//! Writes are atomic (write-then-rename) so concurrent readers never observe
//! partial files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Digest of (backend id, canonical request payload).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend_id: String,
    pub digest: String,
}

impl CacheKey {
    pub fn new(backend_id: &str, payload: &serde_json::Value) -> Self {
        let canonical = serde_json::to_string(payload).expect("JSON value serializes");
        let mut hasher = Sha256::new();
        hasher.update(backend_id.as_bytes());
        hasher.update(b"\n");
        hasher.update(canonical.as_bytes());
        CacheKey {
            backend_id: backend_id.to_string(),
            digest: hex::encode(hasher.finalize()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(&key.backend_id)
            .join(format!("{}.json", key.digest))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<serde_json::Value>> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(body) => {
                let value = serde_json::from_str(&body).map_err(|e| {
                    Error::Format(format!("corrupt cache entry {}: {e}", path.display()))
                })?;
                Ok(Some(value))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &CacheKey, value: &serde_json::Value) -> Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(".{}.tmp", key.digest));
        let body = serde_json::to_string(value).expect("JSON value serializes");
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}
