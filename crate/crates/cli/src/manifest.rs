use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation: what ran, on which inputs, with which seeds,
/// producing which files.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub seed: Option<u64>,
    /// Sub-seeds and how they were derived from `seed`.
    pub seeds: BTreeMap<String, Value>,
    pub artifacts: Vec<String>,
    pub timings: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            seed,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            extra: BTreeMap::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn seed_label(&mut self, label: &str, value: impl Into<Value>) {
        self.seeds.insert(label.to_string(), value.into());
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn timing(&mut self, label: &str, seconds: f64) {
        self.timings.insert(label.to_string(), seconds);
    }

    /// Stamps the total wall-clock time and writes the manifest.
    pub fn finish(mut self, path: &Path) -> Result<PathBuf> {
        if let Some(start) = self.started.take() {
            self.timing("total_seconds", start.elapsed().as_secs_f64());
        }
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

/// `<out>.manifest.json` next to the primary artifact, or
/// `trace-<command>.manifest.json` in the working directory.
pub fn default_path(command: &str, out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("trace-{command}.manifest.json")),
    }
}
