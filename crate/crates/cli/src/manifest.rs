use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use lesionuq_core::scene::write_atomic;

/// Record of one command run. Everything except `wall_time_seconds` is a
/// function of the command line and the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: Vec<String>,
    /// Effective settings after defaults and overrides.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
}

pub fn file_name(command: &str) -> String {
    format!("manifest-{command}.json")
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(file_name(&self.command));
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&path, &json)?;
        Ok(path)
    }
}
