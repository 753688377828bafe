//! Run provenance embedded in every artifact.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration as canonical JSON.
    pub config_hash: String,
    /// SHA-256 of every input file, keyed by the path as given.
    pub input_checksums: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub software_version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Command-specific facts (parameter count, worker count, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Collects the manifest while a command runs.
pub struct ManifestBuilder {
    m: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        let json = serde_json::to_vec(config).expect("configs serialize");
        Self {
            m: RunManifest {
                command: command.into(),
                config_hash: sha256_hex(&json),
                input_checksums: BTreeMap::new(),
                seed: None,
                software_version: env!("CARGO_PKG_VERSION").into(),
                started_at: now(),
                finished_at: String::new(),
                details: BTreeMap::new(),
            },
        }
    }

    /// Reads an input file and records its checksum.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        self.m.input_checksums.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Carries over the checksums another builder has recorded.
    pub fn adopt_inputs(&mut self, other: &ManifestBuilder) {
        self.m.input_checksums.extend(other.m.input_checksums.clone());
    }

    pub fn seed(&mut self, seed: u64) {
        self.m.seed = Some(seed);
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.m.details.insert(key.into(), serde_json::to_value(value).expect("details serialize"));
    }

    pub fn finish(&self) -> RunManifest {
        RunManifest { finished_at: now(), ..self.m.clone() }
    }
}
