//! Content-addressed artifact directory: every blob is stored under the hex
//! sha256 of its bytes, so equal outputs share one ref.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;
use sha2::{Digest, Sha256};

use cforge_core::{Error, Result};

pub struct ArtifactStore {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

pub fn artifact_ref(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A ref is 64 lowercase hex digits; anything else never names an artifact.
pub fn is_ref(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn content_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "image/png"
    } else {
        "application/json"
    }
}

impl ArtifactStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let r = artifact_ref(bytes);
        let path = self.dir.join(&r);
        if !path.exists() {
            // Unique temp name, then an atomic rename: concurrent writers of the
            // same content race harmlessly.
            let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
            let tmp = self.dir.join(format!(".{r}.{}.{n}.tmp", std::process::id()));
            std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(r)
    }

    pub fn put_json<S: Serialize>(&self, value: &S) -> Result<String> {
        self.put(&serde_json::to_vec(value)?)
    }

    /// `None` for malformed or unknown refs.
    pub fn get(&self, r: &str) -> Result<Option<Vec<u8>>> {
        if !is_ref(r) {
            return Ok(None);
        }
        let path = self.dir.join(r);
        match std::fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}
