//! Per-unit stage records: a unit is fresh when its input digest is unchanged
//! and every recorded output still exists with the recorded digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::formats::{with_suffix, FAILED_SUFFIX};
use crate::io::{path_safe, sha256_file, sha256_hex, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitState {
    pub input_digest: String,
    /// Run-relative path → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Builds an input digest from labelled parts, order-sensitive.
#[derive(Debug, Default)]
pub struct InputDigest {
    parts: Vec<(String, String)>,
}

impl InputDigest {
    pub fn new(stage: &str) -> Self {
        let mut d = InputDigest::default();
        d.add("stage", stage).add("pipeline", super::PIPELINE_VERSION);
        d
    }

    pub fn add(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.parts.push((key.to_string(), value.into()));
        self
    }

    /// Adds a file's digest, or `missing` when absent. A quarantined
    /// (`.FAILED`) copy stands in for a missing file.
    pub fn file(&mut self, key: &str, path: &Path) -> Result<&mut Self, PipelineError> {
        let value = match existing(path) {
            Some(p) => sha256_file(&p)?,
            None => "missing".to_string(),
        };
        Ok(self.add(key, value))
    }

    pub fn json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<&mut Self, PipelineError> {
        Ok(self.add(key, serde_json::to_string(value)?))
    }

    pub fn finish(&self) -> String {
        let joined = serde_json::to_string(&self.parts).expect("strings serialize");
        sha256_hex(joined.as_bytes())
    }
}

/// `path` if it exists, else its `.FAILED` twin if that exists.
pub fn existing(path: &Path) -> Option<PathBuf> {
    if path.exists() {
        return Some(path.to_path_buf());
    }
    let failed = with_suffix(path, FAILED_SUFFIX);
    failed.exists().then_some(failed)
}

fn state_path(run_dir: &Path, stage: &str, unit: &str) -> PathBuf {
    run_dir.join("state").join(stage).join(format!("{}.json", path_safe(unit)))
}

pub fn relative(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn is_fresh(run_dir: &Path, stage: &str, unit: &str, input_digest: &str) -> bool {
    let Ok(bytes) = std::fs::read(state_path(run_dir, stage, unit)) else {
        return false;
    };
    let Ok(state) = serde_json::from_slice::<UnitState>(&bytes) else {
        return false;
    };
    state.input_digest == input_digest
        && state.outputs.iter().all(|(rel, digest)| {
            existing(&run_dir.join(rel)).is_some_and(|p| sha256_file(&p).is_ok_and(|d| &d == digest))
        })
}

pub fn record(
    run_dir: &Path,
    stage: &str,
    unit: &str,
    input_digest: &str,
    outputs: &[PathBuf],
) -> Result<(), PipelineError> {
    let mut map = BTreeMap::new();
    for p in outputs {
        let actual = existing(p).ok_or_else(|| PipelineError::Stage {
            stage: stage.to_string(),
            message: format!("declared output {} was not written", p.display()),
        })?;
        map.insert(relative(run_dir, p), sha256_file(&actual)?);
    }
    let state = UnitState { input_digest: input_digest.to_string(), outputs: map };
    let mut bytes = serde_json::to_vec_pretty(&state)?;
    bytes.push(b'\n');
    write_atomic(&state_path(run_dir, stage, unit), &bytes)?;
    Ok(())
}
