use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::CliError;

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Seconds; the only field that differs between identical runs.
    pub wall_time: f64,
}

pub struct Recorder {
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    start: Instant,
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

impl Recorder {
    pub fn new(command: &'static str, seed: Option<u64>, config: impl Serialize) -> Self {
        Recorder {
            command,
            seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(show(p));
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(show(p));
    }

    /// Writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command,
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError {
            code: 1,
            kind: "internal",
            msg: e.to_string(),
        })?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// `<file>.manifest.json` next to a single-file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
