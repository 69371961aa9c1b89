//! Run manifests: enough to reproduce and audit a run. No timestamps or
//! absolute paths, so identical runs give identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::dataset::file_hash;
use super::train::EpochSummary;
use crate::error::{Error, Result};
use crate::metrics::MetricsSummary;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Config,
    /// Input label to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<EpochSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSummary>,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &Config) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            epochs: Vec::new(),
            metrics: None,
            outputs: BTreeMap::new(),
        }
    }

    /// Records the hashes of `files` below `dir`.
    pub fn add_outputs(&mut self, dir: &Path, files: &[&str]) -> Result<()> {
        for f in files {
            self.outputs.insert(f.to_string(), file_hash(&dir.join(f))?);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
