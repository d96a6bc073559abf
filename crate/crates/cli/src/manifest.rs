//! `manifest.json`: per-stage fingerprints and the artifacts each stage
//! wrote, with content hashes. A stage whose fingerprint is unchanged and
//! whose artifacts are intact is skipped.

use lookmark::digest::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub fingerprint: String,
    pub config_hash: String,
    /// Relative path (forward slashes) to SHA-256 of the content.
    pub artifacts: BTreeMap<String, String>,
    pub stats: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub tokenization: String,
    pub multi_ref_policy: String,
    pub stages: BTreeMap<String, StageEntry>,
}

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct OutputError {
    pub path: PathBuf,
    pub message: String,
}

pub fn out_err(path: &Path, e: impl ToString) -> OutputError {
    OutputError {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes through a temp file in the destination directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    let dir = path.parent().expect("artifact has a parent directory");
    std::fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| out_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| out_err(path, e))?;
    tmp.persist(path).map_err(|e| out_err(path, e.error))?;
    Ok(())
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self, OutputError> {
        let path = out.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| out_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(out_err(&path, e)),
        }
    }

    pub fn save(&self, out: &Path) -> Result<(), OutputError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
    }

    /// True when the stage ran with this fingerprint and every artifact it
    /// recorded is still present with the recorded content.
    pub fn is_current(&self, out: &Path, stage: &str, fingerprint: &str) -> bool {
        let Some(e) = self.stages.get(stage) else {
            return false;
        };
        e.fingerprint == fingerprint
            && e.artifacts.iter().all(|(rel, sha)| {
                std::fs::read(out.join(rel))
                    .map(|b| &sha256_hex(&b) == sha)
                    .unwrap_or(false)
            })
    }

    pub fn fingerprint(&self, stage: &str) -> Option<&str> {
        self.stages.get(stage).map(|e| e.fingerprint.as_str())
    }
}

/// Collects what a stage writes so the manifest can attribute it.
pub struct StageWriter<'a> {
    out: &'a Path,
    artifacts: BTreeMap<String, String>,
    pub stats: BTreeMap<String, Value>,
}

impl<'a> StageWriter<'a> {
    pub fn new(out: &'a Path) -> Self {
        Self {
            out,
            artifacts: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, OutputError> {
        let path = self.out.join(rel);
        write_atomic(&path, bytes)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file something else already wrote.
    pub fn record(&mut self, rel: &str) -> Result<(), OutputError> {
        let path = self.out.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| out_err(&path, e))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn stat(&mut self, key: &str, value: impl Into<Value>) {
        self.stats.insert(key.to_string(), value.into());
    }

    /// Files the stage wrote last time but not this time are removed,
    /// except under `keep_prefix` (caches outlive a single run).
    pub fn finish(
        self,
        manifest: &mut Manifest,
        stage: &str,
        fingerprint: String,
        config_hash: &str,
        keep_prefix: Option<&str>,
    ) -> Result<(), OutputError> {
        if let Some(old) = manifest.stages.get(stage) {
            for rel in old.artifacts.keys() {
                let kept = keep_prefix.is_some_and(|p| rel.starts_with(p));
                if !kept && !self.artifacts.contains_key(rel) {
                    let _ = std::fs::remove_file(self.out.join(rel));
                }
            }
        }
        manifest.stages.insert(
            stage.to_string(),
            StageEntry {
                fingerprint,
                config_hash: config_hash.to_string(),
                artifacts: self.artifacts,
                stats: self.stats,
            },
        );
        manifest.save(self.out)
    }
}
