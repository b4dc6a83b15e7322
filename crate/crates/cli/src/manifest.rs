//! Run manifests written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use atrc::pipeline::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Version of the CSV layouts written by the commands.
pub const CSV_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Extra input files, such as checkpoints or architecture files.
    pub inputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub csv_version: u32,
    pub tool_version: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// SHA-256 of the canonical JSON form of the resolved configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, config: &ExperimentConfig, seeds: Vec<u64>, out_dir: &Path) -> Self {
        RunManifest {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash: config_hash(config),
            config: config.clone(),
            seeds,
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
            csv_version: CSV_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn write(&self) -> Result<()> {
        crate::output::write_json(&self.out_dir.join("manifest.json"), self)
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(unix_now());
        self.write()
    }
}
