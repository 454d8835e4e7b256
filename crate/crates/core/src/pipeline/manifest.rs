//! Run manifest: what each stage read and wrote, by content hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::checkpoint::content_hash;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Input file key to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let p = run_dir.join(Self::FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Writes the manifest unless the file already holds identical content.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join(Self::FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        if std::fs::read_to_string(&p).is_ok_and(|old| old == text) {
            return Ok(());
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// Hash some stage recorded for `key` as one of its outputs.
    pub fn produced(&self, key: &str) -> Option<&str> {
        self.stages
            .values()
            .find_map(|s| s.outputs.get(key).map(String::as_str))
    }

    /// Checkpoint hashes of every stage, keyed by file.
    pub fn checkpoint_hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|s| s.outputs.iter())
            .filter(|(k, _)| k.ends_with(".bin"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}
