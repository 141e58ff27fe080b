//! Per-command record of inputs, configuration and outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sprc_core::dataset::write_atomic;

pub const FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full command line, so the run can be repeated from this file alone.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

/// Timestamps a command and collects the files it writes.
pub struct Recorder {
    command: String,
    args: Vec<String>,
    started_at: String,
    outputs: Vec<PathBuf>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Recorder {
    pub fn start(command: &str, args: &[String]) -> Self {
        Self { command: command.into(), args: args.to_vec(), started_at: now(), outputs: Vec::new() }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        let p = path.into();
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    /// Writes `run_manifest.json` into `dir`. Every recorded output must exist.
    pub fn finish(self, dir: &Path, config: serde_json::Value, seed: Option<u64>) -> Result<RunManifest> {
        for p in &self.outputs {
            if !p.exists() {
                bail!("output {} was recorded but does not exist", p.display());
            }
        }
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            config,
            seed,
            version: env!("SPRC_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: now(),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&dir.join(FILE), text.as_bytes())?;
        Ok(manifest)
    }
}
