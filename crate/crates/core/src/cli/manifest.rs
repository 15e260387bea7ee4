use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// `git describe --always --dirty` of the working directory, or "unknown".
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the config file bytes, or of the empty string without one.
    pub config_sha256: String,
    pub config_path: Option<PathBuf>,
    /// Command-line flags that overrode config values.
    pub overrides: Vec<String>,
    pub seed: u64,
    pub checkpoints: BTreeMap<String, OutputEntry>,
    pub outputs: Vec<OutputEntry>,
    pub wall_clock_s: f64,
    pub git_describe: String,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_bytes: Option<&[u8]>, config_path: Option<PathBuf>, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config_sha256: sha256_hex(config_bytes.unwrap_or_default()),
            config_path,
            overrides: Vec::new(),
            seed,
            checkpoints: BTreeMap::new(),
            outputs: Vec::new(),
            wall_clock_s: 0.0,
            git_describe: git_describe(),
            notes: Vec::new(),
        }
    }

    /// Records an input checkpoint under `role`.
    pub fn checkpoint(&mut self, role: &str, path: &Path) -> Result<()> {
        let entry = OutputEntry {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        };
        self.checkpoints.insert(role.to_string(), entry);
        Ok(())
    }

    /// Writes `bytes` to `path` atomically and lists it as an output.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(OutputEntry {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Every listed output exists and matches its hash.
    pub fn verify(&self) -> Result<()> {
        for o in &self.outputs {
            let h = file_sha256(&o.path)?;
            if h != o.sha256 {
                return Err(Error::contract(format!("{} changed since it was written", o.path.display())));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.verify()?;
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}
