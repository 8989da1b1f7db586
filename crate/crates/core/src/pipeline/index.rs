//! Catalog of every artifact in a run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::io::{sha256_file, sha256_hex, write_atomic};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Manifest,
    Embedding,
    Metadata,
    Weights,
    Predictions,
    Metrics,
    Attention,
    Overlay,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 8] = [
        ArtifactKind::Manifest,
        ArtifactKind::Embedding,
        ArtifactKind::Metadata,
        ArtifactKind::Weights,
        ArtifactKind::Predictions,
        ArtifactKind::Metrics,
        ArtifactKind::Attention,
        ArtifactKind::Overlay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Manifest => "manifest",
            ArtifactKind::Embedding => "embedding",
            ArtifactKind::Metadata => "metadata",
            ArtifactKind::Weights => "weights",
            ArtifactKind::Predictions => "predictions",
            ArtifactKind::Metrics => "metrics",
            ArtifactKind::Attention => "attention",
            ArtifactKind::Overlay => "overlay",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ArtifactKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown artifact kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub id: String,
    pub kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<u32>,
    pub version: String,
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub checksum: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub pipeline_version: String,
    pub run_version: String,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Stable artifact id: first 16 hex digits of SHA-256 over the relative path.
pub fn artifact_id(rel_path: &str) -> String {
    sha256_hex(rel_path.as_bytes())[..16].to_string()
}

#[derive(Debug, Default)]
struct Classified {
    kind: Option<ArtifactKind>,
    task: Option<String>,
    encoder: Option<String>,
    split: Option<u32>,
}

fn split_of(name: &str) -> Option<u32> {
    name.strip_prefix("split")?.split('.').next()?.parse().ok()
}

/// Maps a run-relative path to its catalog coordinates. `tasks` maps
/// path-safe task names back to task ids.
fn classify(rel: &str, tasks: &BTreeMap<String, String>) -> Classified {
    let parts: Vec<&str> = rel.split('/').collect();
    let task = |s: &str| Some(tasks.get(s).cloned().unwrap_or_else(|| s.to_string()));
    let stem = |s: &str, suffix: &str| s.strip_suffix(suffix).map(str::to_string);
    let mut c = Classified::default();
    match parts.as_slice() {
        ["resolved_config.toml"] | ["tasks.csv"] => c.kind = Some(ArtifactKind::Manifest),
        ["tiles", f] if f.ends_with(".tiles.csv") || f.ends_with(".rejected.json") => {
            c.kind = Some(ArtifactKind::Manifest)
        }
        ["overlays", f] if f.ends_with(".png") => c.kind = Some(ArtifactKind::Overlay),
        ["embeddings", enc, f] => {
            c.encoder = Some(enc.to_string());
            if f.ends_with(".emb") {
                c.kind = Some(ArtifactKind::Embedding);
            } else if f.ends_with(".emb.meta.json") {
                c.kind = Some(ArtifactKind::Metadata);
            }
        }
        ["qc", f] => {
            c.encoder = stem(f, ".qc.csv");
            c.kind = c.encoder.as_ref().map(|_| ArtifactKind::Metadata);
        }
        ["runs", t, f] => {
            c.task = task(t);
            c.encoder = stem(f, ".run.json");
            c.kind = c.encoder.as_ref().map(|_| ArtifactKind::Manifest);
        }
        ["splits", f] => {
            if let Some(t) = stem(f, ".splits.csv") {
                c.task = task(&t);
                c.kind = Some(ArtifactKind::Manifest);
            }
        }
        ["weights", enc, t, f] if f.ends_with(".gmw") => {
            (c.encoder, c.task, c.split) = (Some(enc.to_string()), task(t), split_of(f));
            c.kind = Some(ArtifactKind::Weights);
        }
        ["logs", enc, f] => {
            if let Some(t) = stem(f, ".train.csv") {
                (c.encoder, c.task) = (Some(enc.to_string()), task(&t));
                c.kind = Some(ArtifactKind::Metrics);
            }
        }
        ["predictions", enc, f] => {
            if let Some(t) = stem(f, ".predictions.csv") {
                (c.encoder, c.task) = (Some(enc.to_string()), task(&t));
                c.kind = Some(ArtifactKind::Predictions);
            }
        }
        ["attention", enc, t, f] if f.ends_with(".attention.csv") => {
            (c.encoder, c.task, c.split) = (Some(enc.to_string()), task(t), split_of(f));
            c.kind = Some(ArtifactKind::Attention);
        }
        ["attention_overlays", enc, t, f] if f.ends_with(".png") => {
            (c.encoder, c.task) = (Some(enc.to_string()), task(t));
            c.kind = Some(ArtifactKind::Overlay);
        }
        ["metrics", f] if f.ends_with(".csv") => c.kind = Some(ArtifactKind::Metrics),
        ["metrics", "plots", f] => {
            if let Some(t) = stem(f, ".json") {
                c.task = task(&t);
                c.kind = Some(ArtifactKind::Metrics);
            }
        }
        _ => {}
    }
    c
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl ArtifactIndex {
    /// Scans `run_dir`, hashing every recognised artifact. Quarantined
    /// (`.FAILED`), temporary and state files are not catalogued.
    pub fn scan(run_dir: &Path, run_version: &str, task_ids: &[String]) -> Result<Self, PipelineError> {
        let tasks: BTreeMap<String, String> = task_ids.iter().map(|t| (crate::io::path_safe(t), t.clone())).collect();
        let mut files = Vec::new();
        walk(run_dir, &mut files)?;
        let mut artifacts = Vec::new();
        for f in files {
            let rel = super::state::relative(run_dir, &f);
            if rel.starts_with("state/") || rel.split('/').any(|p| p.starts_with('.')) {
                continue;
            }
            let c = classify(&rel, &tasks);
            let Some(kind) = c.kind else { continue };
            artifacts.push(ArtifactEntry {
                id: artifact_id(&rel),
                kind,
                task_id: c.task,
                encoder_id: c.encoder,
                split: c.split,
                version: run_version.to_string(),
                checksum: sha256_file(&f)?,
                bytes: std::fs::metadata(&f)?.len(),
                path: rel,
            });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(ArtifactIndex {
            pipeline_version: super::PIPELINE_VERSION.to_string(),
            run_version: run_version.to_string(),
            artifacts,
        })
    }

    pub fn get(&self, id: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.id == id)
    }

    pub fn filter<'a>(
        &'a self,
        kind: Option<ArtifactKind>,
        encoder: Option<&'a str>,
        task: Option<&'a str>,
    ) -> impl Iterator<Item = &'a ArtifactEntry> + 'a {
        self.artifacts.iter().filter(move |a| {
            kind.is_none_or(|k| a.kind == k)
                && encoder.is_none_or(|e| a.encoder_id.as_deref() == Some(e))
                && task.is_none_or(|t| a.task_id.as_deref() == Some(t))
        })
    }

    /// Checks that every entry exists with the recorded digest.
    pub fn verify(&self, run_dir: &Path) -> Result<(), PipelineError> {
        for a in &self.artifacts {
            let p = run_dir.join(&a.path);
            let actual = sha256_file(&p).map_err(|e| PipelineError::Index(format!("{}: {e}", a.path)))?;
            if actual != a.checksum {
                return Err(PipelineError::Index(format!("{}: digest {actual} != {}", a.path, a.checksum)));
            }
        }
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf, PipelineError> {
        let p = run_dir.join(INDEX_FILE);
        write_atomic(&p, &self.to_json_bytes()?)?;
        Ok(p)
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(run_dir.join(INDEX_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_layout() {
        let tasks: BTreeMap<String, String> = [("SYN_GENE1".to_string(), "SYN:GENE1".to_string())].into();
        let c = classify("weights/stub-v1/SYN_GENE1/split3.best_auc.gmw", &tasks);
        assert_eq!(c.kind, Some(ArtifactKind::Weights));
        assert_eq!(c.task.as_deref(), Some("SYN:GENE1"));
        assert_eq!((c.encoder.as_deref(), c.split), (Some("stub-v1"), Some(3)));
        assert_eq!(classify("embeddings/e/s1.emb.FAILED", &tasks).kind, None);
        assert_eq!(classify("embeddings/e/s1.emb.meta.json", &tasks).kind, Some(ArtifactKind::Metadata));
        assert_eq!(classify("state/tile/x.json", &tasks).kind, None);
    }
}
