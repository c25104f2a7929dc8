//! `manifest.json` under the output directory: hashes of the configuration and
//! of every file written, checked before any stored artifact is reused.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the settings that determine the datasets.
    pub data_hash: String,
    /// Hash of the settings that determine the trained state.
    pub model_hash: Option<String>,
    /// Relative path to hash and size.
    pub files: BTreeMap<String, FileEntry>,
    /// Per-command details such as stream ids, sizes and summaries.
    pub sections: BTreeMap<String, serde_json::Value>,
}

pub fn hash_file(path: &Path) -> Result<FileEntry, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(FileEntry { sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 })
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let p = dir.join(FILE_NAME);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(p)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FILE_NAME), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Hashes `rel` under `dir` and records it.
    pub fn record(&mut self, dir: &Path, rel: &str) -> Result<(), CliError> {
        self.files.insert(rel.to_string(), hash_file(&dir.join(rel))?);
        Ok(())
    }

    /// Fails unless `rel` exists and still has its recorded hash.
    pub fn verify(&self, dir: &Path, rel: &str) -> Result<(), CliError> {
        let want = self.files.get(rel).ok_or_else(|| CliError::Missing(rel.to_string()))?;
        let path = dir.join(rel);
        if !path.exists() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        let got = hash_file(&path)?;
        if got != *want {
            return Err(CliError::HashMismatch { what: rel.to_string(), expected: want.sha256.clone(), found: got.sha256 });
        }
        Ok(())
    }

    pub fn expect_data_hash(&self, hash: &str) -> Result<(), CliError> {
        check("dataset settings", &self.data_hash, hash)
    }

    pub fn expect_model_hash(&self, hash: &str) -> Result<(), CliError> {
        match &self.model_hash {
            Some(h) => check("model settings", h, hash),
            None => Err(CliError::Missing("trained checkpoint".into())),
        }
    }
}

fn check(what: &str, stored: &str, current: &str) -> Result<(), CliError> {
    if stored != current {
        return Err(CliError::HashMismatch { what: what.into(), expected: stored.into(), found: current.into() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_detects_modification() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"abc").unwrap();
        let mut m = Manifest::default();
        m.record(dir.path(), "a.bin").unwrap();
        m.verify(dir.path(), "a.bin").unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap().unwrap(), m);
        std::fs::write(dir.path().join("a.bin"), b"abd").unwrap();
        assert!(matches!(m.verify(dir.path(), "a.bin"), Err(CliError::HashMismatch { .. })));
        assert!(matches!(m.verify(dir.path(), "b.bin"), Err(CliError::Missing(_))));
    }

    #[test]
    fn hash_checks() {
        let m = Manifest { data_hash: "x".into(), ..Default::default() };
        m.expect_data_hash("x").unwrap();
        assert!(m.expect_data_hash("y").is_err());
        assert!(matches!(m.expect_model_hash("x"), Err(CliError::Missing(_))));
    }
}
