use std::path::{Path, PathBuf};

use crate::gma::CheckpointKind;
use crate::io::path_safe;

/// Paths inside a run directory. Task ids are made path-safe (`:` → `_`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.toml")
    }

    pub fn tile_manifest(&self, slide: &str) -> PathBuf {
        self.root.join("tiles").join(format!("{slide}.tiles.csv"))
    }

    pub fn rejection(&self, slide: &str) -> PathBuf {
        self.root.join("tiles").join(format!("{slide}.rejected.json"))
    }

    pub fn overlay(&self, slide: &str) -> PathBuf {
        self.root.join("overlays").join(format!("{slide}.overlay.png"))
    }

    pub fn embeddings_dir(&self, encoder: &str) -> PathBuf {
        self.root.join("embeddings").join(encoder)
    }

    pub fn embedding(&self, encoder: &str, slide: &str) -> PathBuf {
        self.embeddings_dir(encoder).join(format!("{slide}.emb"))
    }

    pub fn qc_report(&self, encoder: &str) -> PathBuf {
        self.root.join("qc").join(format!("{encoder}.qc.csv"))
    }

    pub fn tasks_csv(&self) -> PathBuf {
        self.root.join("tasks.csv")
    }

    pub fn run_manifest(&self, task: &str, encoder: &str) -> PathBuf {
        self.root.join("runs").join(path_safe(task)).join(format!("{encoder}.run.json"))
    }

    pub fn splits(&self, task: &str) -> PathBuf {
        self.root.join("splits").join(format!("{}.splits.csv", path_safe(task)))
    }

    pub fn weights(&self, encoder: &str, task: &str, split: u32, kind: CheckpointKind) -> PathBuf {
        self.root.join("weights").join(encoder).join(path_safe(task)).join(format!("split{split}.{kind}.gmw"))
    }

    pub fn train_log(&self, encoder: &str, task: &str) -> PathBuf {
        self.root.join("logs").join(encoder).join(format!("{}.train.csv", path_safe(task)))
    }

    pub fn predictions(&self, encoder: &str, task: &str) -> PathBuf {
        self.root.join("predictions").join(encoder).join(format!("{}.predictions.csv", path_safe(task)))
    }

    pub fn attention(&self, encoder: &str, task: &str, split: u32, kind: CheckpointKind) -> PathBuf {
        self.root
            .join("attention")
            .join(encoder)
            .join(path_safe(task))
            .join(format!("split{split}.{kind}.attention.csv"))
    }

    pub fn attention_overlay(&self, encoder: &str, task: &str, slide: &str) -> PathBuf {
        self.root.join("attention_overlays").join(encoder).join(path_safe(task)).join(format!("{slide}.png"))
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }
}
