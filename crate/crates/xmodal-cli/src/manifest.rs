//! Per-output-directory provenance record. Deliberately timestamp-free so
//! identical runs produce identical manifests.

use crate::config::CliError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use xmodal::rng::fnv1a64;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub file: String,
    pub hash: String,
    pub samples: usize,
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub dataset_config_hash: String,
    pub global_seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, SplitRecord>,
    /// artifact file name -> content hash
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: u64, dataset_hash: u64, seed: u64) -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: format!("{config_hash:016x}"),
            dataset_config_hash: format!("{dataset_hash:016x}"),
            global_seed: seed,
            splits: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            summary: None,
        }
    }

    pub fn record_artifact(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let bytes = std::fs::read(dir.join(name))?;
        self.artifacts
            .insert(name.to_string(), format!("{:016x}", fnv1a64(&bytes)));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| CliError::Stale(format!("bad manifest: {e}")))
    }
}

/// Hash of a file's bytes, for stale-data guards.
pub fn file_hash(path: &Path) -> Result<u64, CliError> {
    Ok(fnv1a64(&std::fs::read(path)?))
}
