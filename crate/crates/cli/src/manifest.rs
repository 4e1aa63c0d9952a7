use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::CliError;

/// Record written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub wallclock_s: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wallclock_s: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn write(mut self, path: &Path, started: Instant) -> Result<(), CliError> {
        self.wallclock_s = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

/// `out.csv` -> `out.manifest.json` in the same directory.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    output.with_file_name(format!("{stem}.manifest.json"))
}
