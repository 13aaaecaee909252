use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Capability, ProviderError};
use crate::digest::{canonical_json, sha256_hex};

/// On-disk record: `<dir>/<capability>/<2-char prefix>/<digest>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: Value,
    pub response: Value,
    pub created_at: String,
}

/// Content-addressed response cache.
///
/// Keys are the SHA-256 of the capability name and the canonical JSON of the
/// request body (which carries the model tag). Writes go through a temporary
/// file and a rename, so readers never observe a partial entry.
#[derive(Clone, Debug)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(capability: Capability, request: &Value) -> String {
        let body = canonical_json(request).expect("json value serializes");
        sha256_hex(format!("{}\n{}", capability.as_str(), body))
    }

    pub fn path_for(&self, capability: Capability, request: &Value) -> PathBuf {
        let key = Self::key(capability, request);
        self.root
            .join(capability.as_str())
            .join(&key[..2])
            .join(format!("{key}.json"))
    }

    /// Cached response, if any. Unreadable entries count as misses.
    pub fn get(&self, capability: Capability, request: &Value) -> Option<Value> {
        let path = self.path_for(capability, request);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if &entry.request == request => Some(entry.response),
            Ok(_) => {
                tracing::warn!(path = %path.display(), "cache entry request mismatch; ignoring");
                None
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "corrupt cache entry; ignoring");
                None
            }
        }
    }

    pub fn put(&self, capability: Capability, request: &Value, response: &Value) -> Result<(), ProviderError> {
        let path = self.path_for(capability, request);
        let dir = path.parent().expect("cache path has a parent");
        let err = |e: std::io::Error| ProviderError::Cache(format!("{}: {e}", path.display()));
        fs::create_dir_all(dir).map_err(err)?;
        let entry = CacheEntry {
            request: request.clone(),
            response: response.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
        let tmp = dir.join(format!(
            ".{}.{}.{:?}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
            std::process::id(),
            std::thread::current().id()
        ));
        let mut f = fs::File::create(&tmp).map_err(err)?;
        f.write_all(&bytes).map_err(err)?;
        f.sync_all().map_err(err)?;
        drop(f);
        fs::rename(&tmp, &path).map_err(err)
    }
}
