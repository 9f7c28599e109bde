//! Per-run output directories and the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved settings after flags were applied over the config file.
    pub settings: serde_json::Value,
    pub config: Option<FileDigest>,
    pub inputs: Vec<FileDigest>,
    /// Output files relative to the run directory.
    pub outputs: Vec<FileDigest>,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
}

fn timestamp() -> String {
    chrono::Utc::now()
        .format("%Y-%m-%dT%H:%M:%S%.3fZ")
        .to_string()
}

/// An output directory `<root>/<timestamp>-<hash>` that collects files and
/// writes `manifest.json` on completion.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    settings: serde_json::Value,
    config: Option<FileDigest>,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    seed: u64,
    started_at: String,
}

impl Run {
    pub fn start(
        root: &Path,
        command: &str,
        settings: serde_json::Value,
        config: Option<FileDigest>,
        inputs: Vec<FileDigest>,
        seed: u64,
    ) -> Result<Self, CliError> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(settings.to_string().as_bytes());
        for d in config.iter().chain(&inputs) {
            h.update(d.sha256.as_bytes());
        }
        let hash = hex::encode(h.finalize());
        let now = chrono::Utc::now();
        let stem = format!("{}-{}", now.format("%Y%m%dT%H%M%S%3fZ"), &hash[..12]);
        let mut dir = root.join(&stem);
        let mut k = 1;
        while dir.exists() {
            k += 1;
            dir = root.join(format!("{stem}-{k}"));
        }
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        log::info!("writing outputs to {}", dir.display());
        Ok(Self {
            dir,
            command: command.to_string(),
            settings,
            config,
            inputs,
            outputs: Vec::new(),
            seed,
            started_at: timestamp(),
        })
    }

    /// Writes `contents` to `name` inside the run directory.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    /// Registers a file some other routine wrote into the run directory.
    pub fn record(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn finish(self) -> Result<RunOutput, CliError> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let mut d = FileDigest::of(p)?;
            d.path = p.strip_prefix(&self.dir).unwrap_or(p).display().to_string();
            outputs.push(d);
        }
        let manifest = RunManifest {
            command: self.command,
            settings: self.settings,
            config: self.config,
            inputs: self.inputs,
            outputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: timestamp(),
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(RunOutput {
            dir: self.dir,
            files: self.outputs,
            manifest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub manifest: RunManifest,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}
