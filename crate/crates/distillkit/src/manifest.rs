//! Run manifests: every command that produces artifacts writes a manifest
//! beside them with the resolved configuration, the seed, and content
//! hashes, sufficient to re-run the command bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{IoError, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub bytes: u64,
    /// FNV-1a 64-bit content hash, hex.
    pub fnv1a64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Kernel-parallelism cap from `DISTILLKIT_THREADS` (kernels are
    /// single-threaded, so any positive cap is honored).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thread_cap: Option<usize>,
    pub resolved_config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

/// FNV-1a over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, resolved_config: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed,
            thread_cap: crate::cli::thread_cap(),
            resolved_config,
            artifacts: Vec::new(),
        }
    }

    /// Hash a produced file into the manifest.
    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| IoError::file(path.display().to_string(), e))?;
        self.artifacts.push(ArtifactEntry {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
        });
        Ok(())
    }

    /// Write `manifest.json` into `dir` and return its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| IoError::file(dir.display().to_string(), e))?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).map_err(|e| IoError::file(path.display().to_string(), e))?;
        Ok(path)
    }
}
