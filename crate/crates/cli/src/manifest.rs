//! Per-stage manifests: input and output content hashes plus the resolved
//! configuration. With `--cache`, a stage whose manifest still matches is
//! skipped.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = concat!("recall ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Paths under the stage directory, or under its parent (sibling stages of
/// one run), are recorded relatively so manifests do not depend on where the
/// run lives.
fn display_path(path: &Path, root: &Path) -> String {
    let rel = path
        .strip_prefix(root)
        .ok()
        .or_else(|| root.parent().filter(|p| !p.as_os_str().is_empty()).and_then(|p| path.strip_prefix(p).ok()));
    rel.unwrap_or(path).display().to_string()
}

fn hash_all(paths: &[PathBuf], root: &Path) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: display_path(p, root),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("{stage}.manifest.json"))
}

/// One pipeline stage: its name, resolved config, and input files.
pub struct Stage<'a> {
    pub name: &'a str,
    pub out: &'a Path,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
}

impl Stage<'_> {
    fn is_fresh(&self, inputs: &[FileHash]) -> bool {
        let Ok(bytes) = std::fs::read(manifest_path(self.out, self.name)) else {
            return false;
        };
        let Ok(m) = serde_json::from_slice::<Manifest>(&bytes) else {
            return false;
        };
        m.tool_version == TOOL_VERSION
            && m.config == self.config
            && m.inputs == inputs
            && m.outputs.iter().all(|o| {
                let p = self.out.join(&o.path);
                sha256_file(&p).map(|h| h == o.sha256).unwrap_or(false)
            })
    }

    /// Runs `body` unless `cache` is set and the previous manifest matches.
    /// `body` returns the output files it wrote. Returns whether it ran.
    pub fn run(self, cache: bool, body: impl FnOnce() -> Result<Vec<PathBuf>>) -> Result<bool> {
        let inputs = hash_all(&self.inputs, self.out)?;
        if cache && self.is_fresh(&inputs) {
            eprintln!("[{}] up to date, skipped", self.name);
            return Ok(false);
        }
        let outputs = body()?;
        let manifest = Manifest {
            stage: self.name.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            config: self.config,
            inputs,
            outputs: hash_all(&outputs, self.out)?,
        };
        let path = manifest_path(self.out, self.name);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(true)
    }
}
