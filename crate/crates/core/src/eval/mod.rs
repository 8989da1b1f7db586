//! Discrimination, calibration and aggregate statistics over prediction tables.

mod metrics;
mod report;
mod summary;

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{
    auroc_scores, pr_curve, reliability_bins, roc_curve, CalibrationBin, PrPoint, RocPoint, DEFAULT_BINS,
};
pub use report::{evaluate, CellMetrics, CheckpointDelta, ContextDelta, EvalReport, PlotCell, RankTable, TaskPlots};
pub use summary::{
    borda_rank, checkpoint_deltas, delta_auroc, median, split_summary, top_k_tasks, BordaRow, MetricTable,
    SplitSummary, N_SPLITS, T_975_DF4,
};

use crate::gma::CheckpointKind;
use crate::io::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("AUROC undefined: predictions contain a single class")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("need at least 2 calibration bins, got {0}")]
    TooFewBins(usize),
    #[error("expected exactly {expected} split values, got {found}")]
    SplitCount { expected: usize, found: usize },
    #[error("incomplete coverage: task {task} has no value for {column}")]
    IncompleteCoverage { task: String, column: String },
    #[error("k = {k} exceeds the {available} available tasks")]
    TooManyTasks { k: usize, available: usize },
    #[error("predictions CSV: {0}")]
    Format(String),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    Cv,
    External,
}

impl Context {
    pub fn as_str(self) -> &'static str {
        match self {
            Context::Cv => "cv",
            Context::External => "external",
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Context {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cv" => Ok(Context::Cv),
            "external" => Ok(Context::External),
            _ => Err(format!("unknown context `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub task_id: String,
    pub split_index: u32,
    pub checkpoint_kind: CheckpointKind,
    pub context: Context,
    pub probability: f64,
    pub label: u8,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !self.probability.is_finite() {
            return Err(EvalError::NonFinite(self.probability));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(EvalError::OutOfRange(self.probability));
        }
        if self.label > 1 {
            return Err(EvalError::BadLabel(self.label));
        }
        Ok(())
    }
}

/// AUROC over prediction records.
pub fn auroc(preds: &[PredictionRecord]) -> Result<f64, EvalError> {
    let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    auroc_scores(&scores, &labels)
}

pub const PREDICTION_COLUMNS: [&str; 8] =
    ["slide_id", "patient_id", "task_id", "split_index", "checkpoint_kind", "context", "probability", "label"];

pub fn predictions_csv(rows: &[PredictionRecord]) -> Result<Vec<u8>, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PREDICTION_COLUMNS)?;
    for r in rows {
        r.validate()?;
        w.write_record([
            r.slide_id.as_str(),
            &r.patient_id,
            &r.task_id,
            &r.split_index.to_string(),
            r.checkpoint_kind.as_str(),
            r.context.as_str(),
            &r.probability.to_string(),
            &r.label.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
}

pub fn write_predictions(rows: &[PredictionRecord], path: &Path) -> Result<(), EvalError> {
    write_atomic(path, &predictions_csv(rows)?)?;
    Ok(())
}

pub fn read_predictions_from<R: Read>(reader: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(PREDICTION_COLUMNS) {
        return Err(EvalError::Format(format!("unexpected header {:?}", r.headers()?)));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| EvalError::Format(format!("row {}: bad {field}", line + 2));
        let rec = PredictionRecord {
            slide_id: rec[0].to_string(),
            patient_id: rec[1].to_string(),
            task_id: rec[2].to_string(),
            split_index: rec[3].parse().map_err(|_| bad("split_index"))?,
            checkpoint_kind: rec[4].parse().map_err(|_| bad("checkpoint_kind"))?,
            context: rec[5].parse().map_err(|_| bad("context"))?,
            probability: rec[6].parse().map_err(|_| bad("probability"))?,
            label: rec[7].parse().map_err(|_| bad("label"))?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    read_predictions_from(std::fs::File::open(path)?)
}
