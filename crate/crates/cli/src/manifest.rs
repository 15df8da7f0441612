//! Per-command run record, written before any work starts and never rewritten.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ugsplat::trainer::TrainConfig;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    /// Commit the binary was built from, when the build provided one.
    pub build: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub scene: String,
    pub start_iteration: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    /// What the run writes, relative to the run directory.
    pub layout: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig, scene: &str, start_iteration: u64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            build: option_env!("UGSPLAT_BUILD_REV").unwrap_or("unknown"),
            seed: config.seed,
            config_hash: format!("{:016x}", config.hash()),
            config: config.clone(),
            scene: scene.to_string(),
            start_iteration,
            inputs: BTreeMap::new(),
            layout: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn output(mut self, name: &str, pattern: &str) -> Self {
        self.layout.insert(name.into(), pattern.into());
        self
    }

    /// Writes `file_name` inside `dir`; refuses to replace an existing manifest.
    pub fn write(&self, dir: &Path, file_name: &str) -> Result<PathBuf> {
        let path = dir.join(file_name);
        if path.exists() {
            bail!("{} already exists; manifests are never overwritten", path.display());
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
