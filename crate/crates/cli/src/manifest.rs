//! Run manifests: what a command read, what it wrote, and enough to run it
//! again.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: String) -> Result<Self> {
        let data = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self { path: recorded_as, sha256: hex::encode(Sha256::digest(&data)), bytes: data.len() as u64 })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub config: Option<FileDigest>,
    pub seed: Option<u64>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub out_dir: PathBuf,
    pub tool_version: String,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to `out_dir`.
    pub outputs: Vec<FileDigest>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RunManifest {
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.out_dir.join(MANIFEST_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Outputs under `dir` whose contents differ from the recorded digests.
    pub fn mismatches(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for o in &self.outputs {
            let path = dir.join(&o.path);
            if !path.exists() || FileDigest::of(&path, o.path.clone())? != *o {
                bad.push(o.path.clone());
            }
        }
        Ok(bad)
    }
}

/// Replace the value of `--out` in `args`, or append one.
pub fn with_out(args: &[String], out: &Path) -> Vec<String> {
    let out = out.display().to_string();
    let mut result = Vec::with_capacity(args.len() + 2);
    let mut replaced = false;
    let mut iter = args.iter();
    while let Some(a) = iter.next() {
        if a == "--out" {
            iter.next();
            result.extend(["--out".to_string(), out.clone()]);
            replaced = true;
        } else if a.starts_with("--out=") {
            result.push(format!("--out={out}"));
            replaced = true;
        } else {
            result.push(a.clone());
        }
    }
    if !replaced {
        result.extend(["--out".to_string(), out]);
    }
    result
}
