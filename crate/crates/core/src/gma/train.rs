use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{forward, loss_and_grads, GmaParams};
use super::optim::Adam;
use super::{Checkpoint, CheckpointKind, GmaError, GmaModel, TrainingConfig};
use crate::eval::auroc_scores;
use crate::formats::{Assignment, EmbeddingArtifact, SplitManifest};
use crate::io::write_atomic;

/// A slide offered for training: its labels plus the artifact, if one exists.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBag<'a> {
    pub slide_id: &'a str,
    pub patient_id: &'a str,
    pub label: u8,
    pub artifact: Option<&'a EmbeddingArtifact>,
    pub qc_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub split: u32,
    pub epoch: u32,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitTraining {
    pub split_index: u32,
    pub best: Checkpoint,
    pub final_epoch: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub task_id: String,
    pub encoder_id: String,
    pub split_manifest_version: String,
    pub splits: Vec<SplitTraining>,
}

impl TrainingRun {
    /// Both checkpoints of every split, as loadable models.
    pub fn models(&self) -> Vec<GmaModel> {
        self.splits
            .iter()
            .flat_map(|s| {
                [&s.best, &s.final_epoch].map(|c| GmaModel {
                    task_id: self.task_id.clone(),
                    encoder_id: self.encoder_id.clone(),
                    split_index: s.split_index,
                    checkpoint: c.clone(),
                })
            })
            .collect()
    }

    pub fn log(&self) -> impl Iterator<Item = &EpochLog> {
        self.splits.iter().flat_map(|s| s.log.iter())
    }
}

pub fn training_log_csv(rows: &[EpochLog]) -> Result<Vec<u8>, GmaError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "epoch", "train_loss", "val_auroc"])?;
    for r in rows {
        w.write_record([r.split.to_string(), r.epoch.to_string(), r.train_loss.to_string(), r.val_auroc.to_string()])?;
    }
    w.into_inner().map_err(|e| GmaError::Io(e.into_error()))
}

pub fn write_training_log(rows: &[EpochLog], path: &Path) -> Result<(), GmaError> {
    write_atomic(path, &training_log_csv(rows)?)?;
    Ok(())
}

fn seeded(tag: &str, seed: u64, split: u32) -> ChaCha8Rng {
    let digest = crate::io::sha256_hex(format!("{tag}\0{seed}\0{split}").as_bytes());
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(&digest, &mut bytes).expect("sha256 hex");
    ChaCha8Rng::from_seed(bytes)
}

/// One bag: `N × M` row-major embeddings and its slide label.
pub type Bag<'a> = (&'a [f32], u8);

/// Trains one split. Validation AUROC is computed on `val` after every epoch;
/// the best checkpoint keeps the earliest epoch among ties.
pub fn train_split(
    train: &[Bag<'_>],
    val: &[Bag<'_>],
    m: usize,
    cfg: &TrainingConfig,
    split_index: u32,
) -> Result<SplitTraining, GmaError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(GmaError::EmptyPartition(split_index));
    }
    let mut params = GmaParams::init(m, cfg.attention_dim, &mut seeded("init", cfg.seed, split_index));
    let mut shuffle_rng = seeded("shuffle", cfg.seed, split_index);
    let mut opt = Adam::new(cfg, params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_labels: Vec<u8> = val.iter().map(|b| b.1).collect();
    let mut log = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total_loss = 0.0;
        for &i in &order {
            let (bag, label) = train[i];
            let (loss, grads) = loss_and_grads(&params, bag, label)?;
            total_loss += loss;
            opt.step(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(GmaError::Diverged { split: split_index, epoch });
        }
        let scores = val.iter().map(|(bag, _)| forward(&params, bag).map(|(p, _)| p)).collect::<Result<Vec<_>, _>>()?;
        let val_auroc = auroc_scores(&scores, &val_labels)?;
        log.push(EpochLog { split: split_index, epoch, train_loss: total_loss / train.len() as f64, val_auroc });
        if best.as_ref().is_none_or(|b| val_auroc > b.val_auroc) {
            best = Some(Checkpoint { epoch, params: params.quantized(), val_auroc, kind: CheckpointKind::BestAuc });
        }
    }
    let final_auroc = log.last().map(|l| l.val_auroc).unwrap_or(f64::NAN);
    Ok(SplitTraining {
        split_index,
        best: best.expect("at least one epoch"),
        final_epoch: Checkpoint {
            epoch: cfg.epochs,
            params: params.quantized(),
            val_auroc: final_auroc,
            kind: CheckpointKind::FinalEpoch,
        },
        log,
    })
}

/// Trains every split of `splits` (in parallel; each split is deterministic).
///
/// Fail-closed: refuses to start if any offered slide lacks an artifact or
/// failed QC. Patients in the split manifest without an offered slide are
/// left out of both partitions.
pub fn train(
    task_id: &str,
    encoder_id: &str,
    splits: &SplitManifest,
    bags: &[LabeledBag<'_>],
    cfg: &TrainingConfig,
) -> Result<TrainingRun, GmaError> {
    let mut offenders: Vec<String> =
        bags.iter().filter(|b| b.artifact.is_none() || !b.qc_pass).map(|b| b.slide_id.to_string()).collect();
    if !offenders.is_empty() {
        offenders.sort();
        return Err(GmaError::ArtifactsUnavailable(offenders));
    }
    let mut dims = bags.iter().filter_map(|b| b.artifact).map(|a| a.dim());
    let m = dims.next().ok_or(GmaError::EmptyPartition(0))?;
    if let Some(d) = dims.find(|&d| d != m) {
        return Err(GmaError::ModelDimMismatch { model: m, artifact: d });
    }

    let mut by_patient: BTreeMap<&str, Vec<&LabeledBag<'_>>> = BTreeMap::new();
    for b in bags {
        by_patient.entry(b.patient_id).or_default().push(b);
    }
    for v in by_patient.values_mut() {
        v.sort_by_key(|b| b.slide_id);
    }

    let results = splits
        .splits
        .par_iter()
        .enumerate()
        .map(|(s, assignment)| {
            let mut parts: HashMap<Assignment, Vec<Bag<'_>>> = HashMap::new();
            for (patient, side) in assignment {
                for b in by_patient.get(patient.as_str()).into_iter().flatten() {
                    let a = b.artifact.expect("checked above");
                    parts.entry(*side).or_default().push((a.data.as_slice(), b.label));
                }
            }
            let train = parts.remove(&Assignment::Train).unwrap_or_default();
            let val = parts.remove(&Assignment::Test).unwrap_or_default();
            train_split(&train, &val, m, cfg, s as u32)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(TrainingRun {
        task_id: task_id.to_string(),
        encoder_id: encoder_id.to_string(),
        split_manifest_version: splits.manifest_version.clone(),
        splits: results,
    })
}
