use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;

/// Hex SHA-256 of the canonical JSON encoding of `v`.
pub fn content_hash<T: Serialize + ?Sized>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// Content-addressed store of reference artifacts. Entries are keyed by
/// the hash of everything that determines them (seed included) and carry
/// that key material, which is compared on load.
#[derive(Debug, Clone)]
pub struct Cache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Entry<K, V> {
    key: K,
    value: V,
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for<K: Serialize>(&self, key: &K, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", content_hash(key)))
    }

    /// Returns the stored value for `key`, computing and storing it on a
    /// miss. A stored entry whose key material differs is an error.
    pub fn get_or_compute<K, V, F>(&self, key: &K, compute: F) -> Result<V, ExperimentError>
    where
        K: Serialize + DeserializeOwned + PartialEq,
        V: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<V, ExperimentError>,
    {
        let path = self.path_for(key, "json");
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let entry: Entry<K, V> = serde_json::from_str(&text)
                .map_err(|e| ExperimentError::Cache(format!("{}: {e}", path.display())))?;
            if &entry.key != key {
                return Err(ExperimentError::Cache(format!(
                    "{} holds a different key",
                    path.display()
                )));
            }
            return Ok(entry.value);
        }
        let value = compute()?;
        std::fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let tmp = path.with_extension("json.tmp");
        let text =
            serde_json::to_string(&Entry { key, value: &value }).expect("serializable entry");
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(value)
    }
}

pub(crate) fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io(format!("{}: {e}", path.display()))
}
