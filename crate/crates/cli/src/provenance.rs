//! Content hashes and the per-directory run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serialisable")))
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    /// Relative to the directory holding the manifest, or absolute for
    /// inputs outside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileEntry {
    pub fn of(path: &Path, base: &Path) -> Result<Self, CliError> {
        let meta = fs::metadata(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let shown = path.strip_prefix(base).unwrap_or(path);
        Ok(Self {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(path)?,
            bytes: meta.len(),
        })
    }
}

/// Everything needed to re-run a command: its arguments, the fully resolved
/// config and the hashes of what it read and wrote.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileEntry>,
    pub files: Vec<FileEntry>,
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_sha256: sha256_json(config),
            config: config.clone(),
            inputs: Vec::new(),
            files: Vec::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.inputs.push(FileEntry::of(&abs, Path::new(""))?);
        Ok(())
    }

    pub fn write(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        for p in outputs {
            self.files.push(FileEntry::of(p, dir)?);
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
