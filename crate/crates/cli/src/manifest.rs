//! Run manifests: every artifact directory a command produces receives
//! exactly one `manifest.toml` recording how to reproduce its contents.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command_line: Vec<String>,
    pub seed: u64,
    /// Full text of the effective run configuration.
    pub config_snapshot: String,
    /// sha256 of referenced checkpoint parameter payloads, keyed by label.
    pub checkpoint_hashes: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(seed: u64, config_snapshot: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command_line: std::env::args().collect(),
            seed,
            config_snapshot,
            checkpoint_hashes: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn record_checkpoint(&mut self, label: &str, ckpt_dir: &Path) -> anyhow::Result<()> {
        let payload = std::fs::read(ckpt_dir.join(dgtta_core::checkpoint::PARAMS_FILE))?;
        let mut hasher = Sha256::new();
        hasher.update(&payload);
        self.checkpoint_hashes
            .insert(label.to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)?;
        std::fs::write(dir.join(RUN_MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Measures the wall-clock time of one stage.
pub struct StageTimer {
    start: Instant,
}

impl StageTimer {
    pub fn start() -> Self {
        Self {
            start: Instant::now(),
        }
    }

    pub fn stop(self, manifest: &mut RunManifest, stage: &str) {
        manifest
            .timings_s
            .insert(stage.to_string(), self.start.elapsed().as_secs_f64());
    }
}
