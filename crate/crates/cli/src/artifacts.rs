//! Cached pipeline artifacts. Each file has a `.key` sidecar holding the
//! digest of its inputs; a matching sidecar means the file can be reused.

use std::fs;
use std::path::{Path, PathBuf};

use icl_relex::digest::json_digest;
use serde_json::Value;

pub struct Artifact {
    path: PathBuf,
    key: String,
}

fn key_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".key");
    PathBuf::from(p)
}

/// The recorded input digest of an artifact, if any.
pub fn read_key(path: &Path) -> Option<String> {
    fs::read_to_string(key_path(path)).ok().map(|s| s.trim().to_string())
}

impl Artifact {
    pub fn new(path: PathBuf, inputs: &Value) -> Self {
        let key = json_digest(inputs).expect("artifact key serializes");
        Self { path, key }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_fresh(&self) -> bool {
        self.path.exists() && read_key(&self.path).as_deref() == Some(self.key.as_str())
    }

    pub fn mark(&self) -> std::io::Result<()> {
        fs::write(key_path(&self.path), format!("{}\n", self.key))
    }
}
