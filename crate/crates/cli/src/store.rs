//! Output directory layout: `manifest.json`, `metrics/*.csv`,
//! `checkpoints/*.json`, `snapshots/*.csv`, `data/*.csv`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "hpft-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub files: Vec<FileEntry>,
    pub summary: Value,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }

    /// Files whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let mut bad = Vec::new();
        for f in &self.files {
            let bytes = std::fs::read(dir.join(&f.path)).map_err(|e| CliError::Missing(format!("{}: {e}", f.path)))?;
            if sha256_hex(&bytes) != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct RunStore {
    root: PathBuf,
    files: Vec<FileEntry>,
}

/// The conflict check of [`RunStore::create`] without touching the disk, so
/// a doomed command fails before any compute.
pub fn preflight(root: &Path, force: bool) -> Result<(), CliError> {
    let nonempty = root.exists() && std::fs::read_dir(root).map_err(CliError::io)?.next().is_some();
    if !nonempty {
        return Ok(());
    }
    if !force {
        return Err(CliError::Conflict(format!(
            "{} exists and is not empty (use --force to replace)",
            root.display()
        )));
    }
    if !root.join(MANIFEST).exists() {
        return Err(CliError::Conflict(format!(
            "{} is not an hpft output directory; refusing to replace it",
            root.display()
        )));
    }
    Ok(())
}

impl RunStore {
    /// Refuses a nonempty directory unless `force`; with `force` only a
    /// previous hpft output (one holding a manifest) is cleared.
    pub fn create(root: &Path, force: bool) -> Result<Self, CliError> {
        preflight(root, force)?;
        if root.exists() && root.join(MANIFEST).exists() {
            std::fs::remove_dir_all(root).map_err(CliError::io)?;
        }
        std::fs::create_dir_all(root).map_err(CliError::io)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(CliError::io)?;
        }
        std::fs::write(&path, bytes).map_err(CliError::io)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Renders through an in-memory writer so the hash covers exactly what
    /// was written.
    pub fn write_with<F>(&mut self, rel: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> hpft::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(rel, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut buf = serde_json::to_vec_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        buf.push(b'\n');
        self.write_bytes(rel, &buf)
    }

    pub fn finish(mut self, command: &str, config: Value, summary: Value) -> Result<Manifest, CliError> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            schema_version: crate::config::SCHEMA_VERSION,
            command: command.into(),
            config,
            files: self.files,
            summary,
        };
        let mut f = std::fs::File::create(self.root.join(MANIFEST)).map_err(CliError::io)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
        writeln!(f, "{text}").map_err(CliError::io)?;
        Ok(manifest)
    }
}
