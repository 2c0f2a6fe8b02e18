//! Run manifests: what was run, on which inputs, producing which bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub probmotion: String,
    pub checkpoint_format: u32,
    pub motion_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            probmotion: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: probmotion::training::CHECKPOINT_VERSION,
            motion_format: probmotion::skeleton::MOTION_FILE_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    /// Arguments, without the program name, that regenerate the outputs
    /// from this manifest and the listed inputs. A `--config` file is
    /// replaced by the manifest itself, so replaying reproduces it too.
    pub argv: Vec<String>,
    /// Fully resolved settings after flags were applied.
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: Versions,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `<primary>.manifest.json`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Rewrites `--config <file>` to point at `manifest`.
pub fn replay_args(argv: &[String], manifest: &Path) -> Vec<String> {
    let target = manifest.display().to_string();
    let mut out = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            it.next();
            out.push(a.clone());
            out.push(target.clone());
        } else if a.starts_with("--config=") {
            out.push(format!("--config={target}"));
        } else {
            out.push(a.clone());
        }
    }
    out
}
