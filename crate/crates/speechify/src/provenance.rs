//! `run.json`: what a command was given, so the run can be repeated.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use crate::io;

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub bytes: u64,
    /// SHA-256 of the git blob encoding, `"blob <len>\0" + content`.
    pub sha256: String,
}

/// Hash content the way git's SHA-256 object format hashes a blob.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub fn hash_input(path: &Path) -> Result<InputRecord> {
    let content = fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(InputRecord {
        path: path.display().to_string(),
        bytes: content.len() as u64,
        sha256: blob_hash(&content),
    })
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a C,
    inputs: Vec<InputRecord>,
}

/// Write `run.json` into `dir`. The record holds no timestamps, so
/// identical runs produce identical files.
pub fn write_run_record<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C, inputs: &[&Path]) -> Result<()> {
    let inputs = inputs.iter().map(|p| hash_input(p)).collect::<Result<Vec<_>>>()?;
    let record = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config,
        inputs,
    };
    io::write_json(&dir.join(RUN_RECORD), &record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }
}
