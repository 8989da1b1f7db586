use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    auroc_scores, pr_curve, reliability_bins, roc_curve, CalibrationBin, PrPoint, RocPoint, DEFAULT_BINS,
};
use super::summary::{borda_rank, delta_auroc, split_summary, BordaRow, MetricTable, SplitSummary, N_SPLITS};
use super::{Context, EvalError, PredictionRecord};
use crate::gma::CheckpointKind;
use crate::io::write_atomic;

type CellKey = (String, String, Context, CheckpointKind);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub task_id: String,
    pub encoder_id: String,
    pub context: Context,
    pub checkpoint_kind: CheckpointKind,
    /// AUROC per split index; `None` where the split's predictions hold one class.
    pub split_aurocs: BTreeMap<u32, Option<f64>>,
    /// Present only when all five splits are defined.
    pub summary: Option<SplitSummary>,
    pub pooled_auroc: Option<f64>,
    pub calibration: Vec<CalibrationBin>,
}

impl CellMetrics {
    /// Summary mean if available, else the mean of the defined splits.
    pub fn mean_auroc(&self) -> Option<f64> {
        if let Some(s) = &self.summary {
            return Some(s.mean);
        }
        let defined: Vec<f64> = self.split_aurocs.values().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDelta {
    pub task_id: String,
    pub encoder_id: String,
    pub checkpoint_kind: CheckpointKind,
    pub external_mean: f64,
    pub cv_mean: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDelta {
    pub task_id: String,
    pub encoder_id: String,
    pub context: Context,
    pub split_index: u32,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub context: Context,
    pub checkpoint_kind: CheckpointKind,
    pub tasks: Vec<String>,
    pub rows: Vec<BordaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotCell {
    pub encoder_id: String,
    pub context: Context,
    pub checkpoint_kind: CheckpointKind,
    pub auroc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub calibration: Vec<CalibrationBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlots {
    pub task_id: String,
    pub cells: Vec<PlotCell>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub cells: Vec<CellMetrics>,
    pub context_deltas: Vec<ContextDelta>,
    pub checkpoint_deltas: Vec<CheckpointDelta>,
    pub ranks: Vec<RankTable>,
    pub plots: Vec<TaskPlots>,
}

fn scores_labels<'a>(preds: impl Iterator<Item = &'a PredictionRecord>) -> (Vec<f64>, Vec<u8>) {
    preds.map(|p| (p.probability, p.label)).unzip()
}

fn undefined_ok<T>(r: Result<T, EvalError>) -> Result<Option<T>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::SingleClass | EvalError::NoPositives) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates prediction tables, one per encoder.
pub fn evaluate(tables: &[(String, Vec<PredictionRecord>)]) -> Result<EvalReport, EvalError> {
    let mut grouped: BTreeMap<CellKey, Vec<&PredictionRecord>> = BTreeMap::new();
    for (encoder, preds) in tables {
        for p in preds {
            p.validate()?;
            grouped.entry((p.task_id.clone(), encoder.clone(), p.context, p.checkpoint_kind)).or_default().push(p);
        }
    }

    let mut report = EvalReport::default();
    let mut plots: BTreeMap<String, Vec<PlotCell>> = BTreeMap::new();
    for ((task_id, encoder_id, context, kind), preds) in &grouped {
        let mut per_split: BTreeMap<u32, Vec<&PredictionRecord>> = BTreeMap::new();
        for p in preds {
            per_split.entry(p.split_index).or_default().push(p);
        }
        let mut split_aurocs = BTreeMap::new();
        for (s, rows) in &per_split {
            let (sc, lb) = scores_labels(rows.iter().copied());
            split_aurocs.insert(*s, undefined_ok(auroc_scores(&sc, &lb))?);
        }
        let defined: Vec<f64> = split_aurocs.values().flatten().copied().collect();
        let summary = if defined.len() == N_SPLITS { Some(split_summary(&defined)?) } else { None };
        let (sc, lb) = scores_labels(preds.iter().copied());
        let calibration = reliability_bins(&sc, &lb, DEFAULT_BINS)?;
        let pooled_auroc = undefined_ok(auroc_scores(&sc, &lb))?;
        plots.entry(task_id.clone()).or_default().push(PlotCell {
            encoder_id: encoder_id.clone(),
            context: *context,
            checkpoint_kind: *kind,
            auroc: pooled_auroc,
            roc: undefined_ok(roc_curve(&sc, &lb))?.unwrap_or_default(),
            pr: undefined_ok(pr_curve(&sc, &lb))?.unwrap_or_default(),
            calibration: calibration.clone(),
        });
        report.cells.push(CellMetrics {
            task_id: task_id.clone(),
            encoder_id: encoder_id.clone(),
            context: *context,
            checkpoint_kind: *kind,
            split_aurocs,
            summary,
            pooled_auroc,
            calibration,
        });
    }

    let find = |t: &str, e: &str, c: Context, k: CheckpointKind| {
        report.cells.iter().find(|m| m.task_id == t && m.encoder_id == e && m.context == c && m.checkpoint_kind == k)
    };
    for cell in report.cells.iter().filter(|c| c.context == Context::External) {
        let internal = find(&cell.task_id, &cell.encoder_id, Context::Cv, cell.checkpoint_kind);
        if let (Some(ext), Some(cv)) = (cell.mean_auroc(), internal.and_then(CellMetrics::mean_auroc)) {
            report.context_deltas.push(ContextDelta {
                task_id: cell.task_id.clone(),
                encoder_id: cell.encoder_id.clone(),
                checkpoint_kind: cell.checkpoint_kind,
                external_mean: ext,
                cv_mean: cv,
                delta: delta_auroc(ext, cv),
            });
        }
    }
    for cell in report.cells.iter().filter(|c| c.checkpoint_kind == CheckpointKind::BestAuc) {
        let Some(fin) = find(&cell.task_id, &cell.encoder_id, cell.context, CheckpointKind::FinalEpoch) else {
            continue;
        };
        for (s, best) in &cell.split_aurocs {
            if let (Some(b), Some(Some(f))) = (best, fin.split_aurocs.get(s)) {
                report.checkpoint_deltas.push(CheckpointDelta {
                    task_id: cell.task_id.clone(),
                    encoder_id: cell.encoder_id.clone(),
                    context: cell.context,
                    split_index: *s,
                    delta: b - f,
                });
            }
        }
    }

    // Rank sums use split-mean AUROCs; tasks lacking a value for any encoder
    // in this (context, checkpoint) slice are left out.
    let encoders: Vec<&String> = tables.iter().map(|(e, _)| e).collect();
    let mut slices: BTreeMap<(Context, CheckpointKind), MetricTable> = BTreeMap::new();
    for c in &report.cells {
        if let Some(m) = c.mean_auroc() {
            slices
                .entry((c.context, c.checkpoint_kind))
                .or_default()
                .entry(c.task_id.clone())
                .or_default()
                .insert(c.encoder_id.clone(), m);
        }
    }
    for ((context, kind), mut table) in slices {
        table.retain(|_, row| encoders.iter().all(|e| row.contains_key(*e)));
        if table.is_empty() {
            continue;
        }
        report.ranks.push(RankTable {
            context,
            checkpoint_kind: kind,
            tasks: table.keys().cloned().collect(),
            rows: borda_rank(&table)?,
        });
    }
    report.plots = plots.into_iter().map(|(task_id, cells)| TaskPlots { task_id, cells }).collect();
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn metrics_csv(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task_id", "encoder_id", "context", "checkpoint_kind", "metric", "value"])?;
        for c in &self.cells {
            let mut row = |metric: &str, value: String| {
                w.write_record([
                    &c.task_id,
                    &c.encoder_id,
                    c.context.as_str(),
                    c.checkpoint_kind.as_str(),
                    metric,
                    &value,
                ])
            };
            for (s, a) in &c.split_aurocs {
                row(&format!("auroc_split_{s}"), opt(*a))?;
            }
            row("auroc_pooled", opt(c.pooled_auroc))?;
            if let Some(s) = &c.summary {
                row("auroc_mean", s.mean.to_string())?;
                row("auroc_std", s.std.to_string())?;
                row("auroc_ci95_t_low", s.ci_low.to_string())?;
                row("auroc_ci95_t_high", s.ci_high.to_string())?;
            }
        }
        for d in &self.context_deltas {
            w.write_record([
                &d.task_id,
                &d.encoder_id,
                "external_minus_cv",
                d.checkpoint_kind.as_str(),
                "delta_auroc",
                &d.delta.to_string(),
            ])?;
        }
        for d in &self.checkpoint_deltas {
            w.write_record([
                &d.task_id,
                &d.encoder_id,
                d.context.as_str(),
                "best_auc_minus_final_epoch",
                &format!("delta_auroc_split_{}", d.split_index),
                &d.delta.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
    }

    pub fn calibration_csv(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "task_id",
            "encoder_id",
            "context",
            "checkpoint_kind",
            "bin_lower",
            "bin_upper",
            "mean_predicted",
            "observed_rate",
            "count",
        ])?;
        for c in &self.cells {
            for b in &c.calibration {
                w.write_record([
                    c.task_id.as_str(),
                    &c.encoder_id,
                    c.context.as_str(),
                    c.checkpoint_kind.as_str(),
                    &b.lower.to_string(),
                    &b.upper.to_string(),
                    &opt(b.mean_predicted),
                    &opt(b.observed_rate),
                    &b.count.to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
    }

    pub fn ranks_csv(&self) -> Result<Vec<u8>, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["context", "checkpoint_kind", "encoder_id", "rank_sum", "mean_auroc", "n_tasks"])?;
        for t in &self.ranks {
            for r in &t.rows {
                w.write_record([
                    t.context.as_str(),
                    t.checkpoint_kind.as_str(),
                    &r.encoder_id,
                    &r.rank_sum.to_string(),
                    &r.mean_auroc.to_string(),
                    &r.n_tasks.to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| EvalError::Io(e.into_error()))
    }

    /// Writes `metrics.csv`, `calibration.csv`, `ranks.csv` and
    /// `plots/<task>.json` under `dir`. Returns the written paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, EvalError> {
        let mut written = Vec::new();
        for (name, bytes) in [
            ("metrics.csv", self.metrics_csv()?),
            ("calibration.csv", self.calibration_csv()?),
            ("ranks.csv", self.ranks_csv()?),
        ] {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            written.push(p);
        }
        for plot in &self.plots {
            let p = dir.join("plots").join(format!("{}.json", crate::io::path_safe(&plot.task_id)));
            let mut bytes = serde_json::to_vec_pretty(plot)?;
            bytes.push(b'\n');
            write_atomic(&p, &bytes)?;
            written.push(p);
        }
        Ok(written)
    }
}
