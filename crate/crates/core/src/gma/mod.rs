//! Gated-attention multiple-instance learning head: forward pass, analytic
//! gradients, training with dual checkpointing, and frozen-weight inference.

mod attention;
mod model;
mod optim;
mod train;
mod weights;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionExport, AttentionRow};
pub use model::{bce, forward, forward_full, loss_and_grads, Forward, GmaParams, PROB_CLAMP};
pub use optim::Adam;
pub use train::{
    train, train_split, training_log_csv, write_training_log, Bag, EpochLog, LabeledBag, SplitTraining, TrainingRun,
};
pub use weights::{WEIGHTS_FORMAT_VERSION, WEIGHTS_MAGIC};

use crate::eval::EvalError;
use crate::formats::EmbeddingArtifact;

#[derive(Debug, thiserror::Error)]
pub enum GmaError {
    #[error("bag length {found_len} is not a multiple of model dimension {expected}")]
    DimMismatch { expected: usize, found_len: usize },
    #[error("model expects dimension {model}, artifact has {artifact}")]
    ModelDimMismatch { model: usize, artifact: usize },
    #[error("empty bag")]
    EmptyBag,
    #[error("bag contains NaN or Inf")]
    NonFiniteBag,
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("required artifacts missing or failing QC: {}", .0.join(", "))]
    ArtifactsUnavailable(Vec<String>),
    #[error("split {0} has an empty train or validation partition")]
    EmptyPartition(u32),
    #[error("training diverged (non-finite parameters) in split {split} at epoch {epoch}")]
    Diverged { split: u32, epoch: u32 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed hyperparameters shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub attention_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            attention_dim: 128,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            epochs: 120,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), GmaError> {
        if self.attention_dim == 0 || self.epochs == 0 {
            return Err(GmaError::Config("attention_dim and epochs must be positive".into()));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(GmaError::Config("learning rate / betas out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    BestAuc,
    FinalEpoch,
}

impl CheckpointKind {
    pub const ALL: [CheckpointKind; 2] = [CheckpointKind::BestAuc, CheckpointKind::FinalEpoch];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::BestAuc => "best_auc",
            CheckpointKind::FinalEpoch => "final_epoch",
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckpointKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "best_auc" => Ok(CheckpointKind::BestAuc),
            "final_epoch" => Ok(CheckpointKind::FinalEpoch),
            _ => Err(format!("unknown checkpoint kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub params: GmaParams,
    pub val_auroc: f64,
    pub kind: CheckpointKind,
}

/// A checkpoint with the provenance stored in its weights file.
#[derive(Debug, Clone, PartialEq)]
pub struct GmaModel {
    pub task_id: String,
    pub encoder_id: String,
    pub split_index: u32,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideScore {
    pub slide_id: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predictions: Vec<SlideScore>,
    pub attention: AttentionExport,
}

/// Frozen-weight inference over slides. Parameters are only read.
pub fn infer(model: &GmaModel, slides: &[(&str, &EmbeddingArtifact)]) -> Result<Inference, GmaError> {
    let params = &model.checkpoint.params;
    if let Some((_, a)) = slides.iter().find(|(_, a)| a.dim() != params.m) {
        return Err(GmaError::ModelDimMismatch { model: params.m, artifact: a.dim() });
    }
    let outputs = slides
        .par_iter()
        .map(|(slide_id, artifact)| forward(params, &artifact.data).map(|r| (*slide_id, r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut predictions = Vec::with_capacity(outputs.len());
    let mut rows = Vec::new();
    for (slide_id, (probability, attention)) in outputs {
        predictions.push(SlideScore { slide_id: slide_id.to_string(), probability });
        rows.extend(attention.into_iter().enumerate().map(|(i, a)| AttentionRow {
            slide_id: slide_id.to_string(),
            tile_index: i as u32,
            attention: a,
        }));
    }
    Ok(Inference { predictions, attention: AttentionExport { checkpoint_kind: model.checkpoint.kind, rows } })
}
