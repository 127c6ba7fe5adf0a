//! Run manifests and content hashes.
//!
//! File hashes follow git's object format with SHA-256: the digest of
//! `blob <len>\0` followed by the file bytes. A directory hashes the sorted
//! list of `<file hash> <relative path>` lines of every file below it.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Content hash of a file or directory tree. Files whose name is in
/// `skip` are left out, so a directory's own manifest does not hash itself.
pub fn content_hash(path: &Path, skip: &[&str]) -> Result<String> {
    if path.is_file() {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(blob_hash(&bytes));
    }
    let mut listing = String::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", path.display()))?;
        if !entry.file_type().is_file() || skip.iter().any(|s| entry.file_name() == *s) {
            continue;
        }
        let bytes = std::fs::read(entry.path())?;
        let rel = entry
            .path()
            .strip_prefix(path)?
            .to_string_lossy()
            .replace('\\', "/");
        listing.push_str(&format!("{} {rel}\n", blob_hash(&bytes)));
    }
    Ok(blob_hash(listing.as_bytes()))
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub hash: String,
}

impl Artifact {
    pub fn of(path: &Path, skip: &[&str]) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            hash: content_hash(path, skip)?,
        })
    }
}

/// Everything needed to rerun a subcommand: its arguments, the resolved
/// configuration, the seed, and hashes of what went in and came out.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Fully resolved configuration (file plus overrides) as TOML.
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub inputs: BTreeMap<String, Artifact>,
    pub outputs: BTreeMap<String, Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            args,
            seed: None,
            config: None,
            config_hash: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, cfg: &diffcap_core::config::RunConfig) -> Self {
        self.config = Some(cfg.to_toml());
        self.config_hash = Some(cfg.content_hash());
        self
    }

    pub fn input(&mut self, name: &str, path: &Path, skip: &[&str]) -> Result<()> {
        self.inputs
            .insert(name.to_string(), Artifact::of(path, skip)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path, skip: &[&str]) -> Result<()> {
        self.outputs
            .insert(name.to_string(), Artifact::of(path, skip)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
