use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use ser_core::manifest::write_atomic;

use crate::CliError;

/// Reproducibility record written next to each command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: 0.0,
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    /// `DIR/run_manifest.json` for directory outputs, `FILE.run.json` otherwise.
    pub fn location(out: &Path, out_is_dir: bool) -> PathBuf {
        if out_is_dir {
            out.join("run_manifest.json")
        } else {
            let mut s = out.as_os_str().to_owned();
            s.push(".run.json");
            PathBuf::from(s)
        }
    }

    pub fn finish(mut self, out: &Path, out_is_dir: bool) -> Result<(), CliError> {
        self.finished_at = now();
        let path = Self::location(out, out_is_dir);
        let json = serde_json::to_string_pretty(&self).expect("run manifest serializes");
        write_atomic(&path, json.as_bytes()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}
