use std::collections::BTreeMap;
use std::path::Path;

use oos_core::experiment::{Aggregate, Scores};
use oos_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    /// Paths are relative to the manifest's directory.
    pub checkpoint: String,
    pub history: String,
    pub metrics: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub settings: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input file name to sha256 of its contents.
    pub fingerprints: BTreeMap<String, String>,
    pub runs: Vec<SeedEntry>,
    pub aggregate: Aggregate,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
