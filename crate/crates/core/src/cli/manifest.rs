//! Per-run `manifest.json`: config hash, seed, version, summary metrics and
//! pass/fail verdicts.

use super::config::ToleranceSpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    /// SHA-256 of the raw config bytes.
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// "ok" or "numerical-error".
    pub status: String,
    /// All bounds in `tolerances` satisfied by `summary`.
    pub pass: bool,
    pub summary: BTreeMap<String, f64>,
    /// Informational flags (not gating); gate through `tolerances` instead.
    pub verdicts: BTreeMap<String, bool>,
    pub tolerances: ToleranceSpec,
    /// Paths of the artifacts written by the run, relative to the output dir.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(
        experiment: &str,
        config_hash: String,
        seed: u64,
        tolerances: ToleranceSpec,
    ) -> Self {
        Manifest {
            experiment: experiment.to_string(),
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: "ok".to_string(),
            pass: false,
            summary: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            tolerances,
            outputs: Vec::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_string(), value);
    }

    pub fn verdict(&mut self, key: &str, value: bool) {
        self.verdicts.insert(key.to_string(), value);
    }

    pub fn finalize(&mut self) {
        self.pass = self.tolerances.pass(&self.summary);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
