use serde::{Deserialize, Serialize};

use super::EvalError;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(u64, u64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    let mut pos = 0;
    for &l in labels {
        match l {
            0 => {}
            1 => pos += 1,
            other => return Err(EvalError::BadLabel(other)),
        }
    }
    Ok((pos, labels.len() as u64 - pos))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let (p, n) = if labels[i] == 1 { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((scores[i], p, n)),
        }
    }
    groups
}

/// Mann-Whitney AUROC: (concordant + ½·tied) / (n_pos·n_neg).
pub fn auroc_scores(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    // Walking from the highest score down, every positive in a group beats the
    // negatives not yet seen and ties with the negatives in its own group.
    let mut neg_seen = 0u64;
    let mut twice_credit = 0u128;
    for (_, p, n) in tie_groups(scores, labels) {
        let below = n_neg - neg_seen - n;
        twice_credit += 2 * p as u128 * below as u128 + p as u128 * n as u128;
        neg_seen += n;
    }
    Ok(twice_credit as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points at each distinct threshold, descending; the first point is (0, 0)
/// with an infinite threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>, EvalError> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut out = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (t, p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        out.push(RocPoint { threshold: t, fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points at each distinct threshold in descending order.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<PrPoint>, EvalError> {
    let (n_pos, _) = check_inputs(scores, labels)?;
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    Ok(tie_groups(scores, labels)
        .into_iter()
        .map(|(t, p, n)| {
            tp += p;
            fp += n;
            PrPoint { threshold: t, recall: tp as f64 / n_pos as f64, precision: tp as f64 / (tp + fp) as f64 }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_predicted: Option<f64>,
    pub observed_rate: Option<f64>,
    pub count: u64,
}

pub const DEFAULT_BINS: usize = 10;

/// Equal-width reliability bins on [0, 1]; the last bin is closed on the right.
pub fn reliability_bins(scores: &[f64], labels: &[u8], n_bins: usize) -> Result<Vec<CalibrationBin>, EvalError> {
    if n_bins < 2 {
        return Err(EvalError::TooFewBins(n_bins));
    }
    check_inputs(scores, labels)?;
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::OutOfRange(s));
    }
    let mut sums = vec![(0.0f64, 0u64, 0u64); n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += s;
        sums[b].1 += l as u64;
        sums[b].2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (sum, pos, count))| CalibrationBin {
            lower: i as f64 / n_bins as f64,
            upper: (i + 1) as f64 / n_bins as f64,
            mean_predicted: (count > 0).then(|| sum / count as f64),
            observed_rate: (count > 0).then(|| pos as f64 / count as f64),
            count,
        })
        .collect())
}
