// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests written next to every output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Full argument vector, replayable as is.
    pub argv: Vec<String>,
    pub model: Option<PathBuf>,
    /// Prompt text or corpus and CSV paths.
    pub inputs: BTreeMap<String, Value>,
    pub tau: Option<f64>,
    pub renormalize: Option<bool>,
    /// Every other effective flag value.
    pub flags: BTreeMap<String, Value>,
    pub outputs: Vec<PathBuf>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().collect(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, key: &str, v: impl Into<Value>) {
        self.inputs.insert(key.to_string(), v.into());
    }

    pub fn flag(&mut self, key: &str, v: impl Into<Value>) {
        self.flags.insert(key.to_string(), v.into());
    }

    pub fn time(&mut self, key: &str, ms: f64) {
        self.timings_ms.insert(key.to_string(), ms);
    }

    /// Writes `contents` to `dir/name` and records the path.
    pub fn write_output(
        &mut self,
        dir: &Path,
        name: &str,
        contents: &str,
    ) -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    /// Writes `dir/<command>.manifest.json`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        let text =
            serde_json::to_string_pretty(&self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}
