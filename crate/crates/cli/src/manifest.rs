use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

/// Everything needed to rerun a command: the resolved configuration, the
/// seed and the files it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn finish(mut self, start: Instant, path: &Path) -> anyhow::Result<()> {
        self.wall_time_secs = start.elapsed().as_secs_f64();
        self.outputs.push(path.to_path_buf());
        fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}
