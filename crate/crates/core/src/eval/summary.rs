use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Two-sided 97.5% quantile of Student's t with 4 degrees of freedom.
pub const T_975_DF4: f64 = 2.776;
pub const N_SPLITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean, sample standard deviation and t-interval over the five split AUROCs.
pub fn split_summary(aurocs: &[f64]) -> Result<SplitSummary, EvalError> {
    if aurocs.len() != N_SPLITS {
        return Err(EvalError::SplitCount { expected: N_SPLITS, found: aurocs.len() });
    }
    if let Some(&v) = aurocs.iter().find(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(v));
    }
    let n = aurocs.len() as f64;
    let mean = aurocs.iter().sum::<f64>() / n;
    let std = (aurocs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let half = T_975_DF4 * std / n.sqrt();
    Ok(SplitSummary { mean, std, ci_low: mean - half, ci_high: mean + half })
}

/// Positive when the external context outperforms the internal one.
pub fn delta_auroc(external_mean: f64, internal_mean: f64) -> f64 {
    external_mean - internal_mean
}

/// Per-split ΔAUROC between the best-AUC and final-epoch checkpoints.
pub fn checkpoint_deltas(best: &[f64], final_epoch: &[f64]) -> Result<Vec<f64>, EvalError> {
    if best.len() != final_epoch.len() {
        return Err(EvalError::LengthMismatch { scores: best.len(), labels: final_epoch.len() });
    }
    Ok(best.iter().zip(final_epoch).map(|(b, f)| b - f).collect())
}

/// AUROC (or any score) table: task → column → value.
pub type MetricTable = BTreeMap<String, BTreeMap<String, f64>>;

fn check_coverage(table: &MetricTable) -> Result<BTreeSet<&str>, EvalError> {
    let columns: BTreeSet<&str> = table.values().flat_map(|r| r.keys().map(String::as_str)).collect();
    for (task, row) in table {
        if let Some(missing) = columns.iter().find(|c| !row.contains_key(**c)) {
            return Err(EvalError::IncompleteCoverage { task: task.clone(), column: missing.to_string() });
        }
        if let Some(&v) = row.values().find(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(v));
        }
    }
    Ok(columns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BordaRow {
    pub encoder_id: String,
    pub rank_sum: f64,
    pub mean_auroc: f64,
    pub n_tasks: usize,
}

/// Borda-style rank sum over tasks (rank 1 = highest AUROC, ties share the
/// mean of their ranks). Sorted by rank sum, then encoder id.
pub fn borda_rank(table: &MetricTable) -> Result<Vec<BordaRow>, EvalError> {
    let encoders = check_coverage(table)?;
    let mut rows: Vec<BordaRow> = encoders
        .iter()
        .map(|e| BordaRow { encoder_id: e.to_string(), rank_sum: 0.0, mean_auroc: 0.0, n_tasks: table.len() })
        .collect();
    for row in table.values() {
        for out in rows.iter_mut() {
            let v = row[&out.encoder_id];
            let above = row.values().filter(|&&o| o > v).count();
            let tied = row.values().filter(|&&o| o == v).count();
            out.rank_sum += above as f64 + (tied as f64 + 1.0) / 2.0;
            out.mean_auroc += v;
        }
    }
    for r in &mut rows {
        if r.n_tasks > 0 {
            r.mean_auroc /= r.n_tasks as f64;
        }
    }
    rows.sort_by(|a, b| a.rank_sum.total_cmp(&b.rank_sum).then_with(|| a.encoder_id.cmp(&b.encoder_id)));
    Ok(rows)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// The k tasks with highest median over all (encoder × context) cells; ties
/// broken by task id.
pub fn top_k_tasks(table: &MetricTable, k: usize) -> Result<Vec<(String, f64)>, EvalError> {
    check_coverage(table)?;
    if k > table.len() {
        return Err(EvalError::TooManyTasks { k, available: table.len() });
    }
    let mut ranked: Vec<(String, f64)> = table
        .iter()
        .map(|(t, row)| (t.clone(), median(&row.values().copied().collect::<Vec<_>>()).unwrap_or(f64::NAN)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &[(&str, f64)])]) -> MetricTable {
        rows.iter()
            .map(|(t, cells)| (t.to_string(), cells.iter().map(|(c, v)| (c.to_string(), *v)).collect()))
            .collect()
    }

    #[test]
    fn summary_fixtures() {
        let s = split_summary(&[0.8; 5]).unwrap();
        assert_eq!((s.mean, s.std, s.ci_low, s.ci_high), (0.8, 0.0, 0.8, 0.8));
        let s = split_summary(&[0.6, 0.7, 0.8, 0.9, 1.0]).unwrap();
        assert!((s.mean - 0.8).abs() < 1e-12);
        assert!((s.std - 0.1581).abs() < 1e-4);
        assert!((s.ci_low - 0.6037).abs() < 1e-3 && (s.ci_high - 0.9963).abs() < 1e-3);
        assert!(split_summary(&[0.1, 0.2, 0.3, 0.4]).is_err());
    }

    #[test]
    fn delta_sign() {
        assert!((delta_auroc(0.85, 0.781) - 0.069).abs() < 1e-12);
        assert!((delta_auroc(0.60, 0.722) + 0.122).abs() < 1e-12);
        assert_eq!(delta_auroc(0.7, 0.7), 0.0);
    }

    #[test]
    fn borda_fixtures() {
        let t = table(&[("t1", &[("a", 0.9), ("b", 0.7)]), ("t2", &[("a", 0.8), ("b", 0.6)])]);
        let r = borda_rank(&t).unwrap();
        assert_eq!((r[0].encoder_id.as_str(), r[0].rank_sum), ("a", 2.0));
        assert_eq!((r[1].encoder_id.as_str(), r[1].rank_sum), ("b", 4.0));

        let t = table(&[("t1", &[("a", 0.7), ("b", 0.7)]), ("t2", &[("a", 0.6), ("b", 0.6)])]);
        let r = borda_rank(&t).unwrap();
        assert_eq!(r[0].rank_sum, r[1].rank_sum);

        let t = table(&[("t1", &[("a", 0.7), ("b", 0.7)]), ("t2", &[("a", 0.6)])]);
        assert!(matches!(borda_rank(&t), Err(EvalError::IncompleteCoverage { .. })));
    }

    #[test]
    fn top_k_fixtures() {
        let t = table(&[
            ("x", &[("c1", 0.6), ("c2", 0.6)]),
            ("a", &[("c1", 0.6), ("c2", 0.6)]),
            ("dominant", &[("c1", 0.95), ("c2", 0.9)]),
        ]);
        let top = top_k_tasks(&t, 3).unwrap();
        let names: Vec<_> = top.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["dominant", "a", "x"]);
        assert!(top_k_tasks(&t, 4).is_err());
    }
}
