use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::QcError;
use crate::formats::EmbeddingMetadata;

/// Pearson r. `None` when either vector has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub encoders: Vec<String>,
    pub shared_slides: Vec<String>,
    /// `r[i][j]`; `None` where a variance vector is constant.
    pub r: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    /// The correlation for a pair, as an error when undefined.
    pub fn get(&self, a: &str, b: &str) -> Result<f64, QcError> {
        let idx = |e: &str| self.encoders.iter().position(|x| x == e);
        let (Some(i), Some(j)) = (idx(a), idx(b)) else {
            return Err(QcError::Report(format!("unknown encoder pair {a}/{b}")));
        };
        self.r[i][j].ok_or_else(|| QcError::UndefinedCorrelation { a: a.into(), b: b.into() })
    }
}

/// Pearson correlation of per-slide embedding variance between every pair of
/// encoders, over the slides all encoders cover.
pub fn variance_correlation(metadata: &BTreeMap<String, Vec<EmbeddingMetadata>>) -> Result<CorrelationMatrix, QcError> {
    if metadata.len() < 2 {
        return Err(QcError::TooFewEncoders(metadata.len()));
    }
    let per_encoder: Vec<BTreeMap<&str, f64>> =
        metadata.values().map(|ms| ms.iter().map(|m| (m.slide_id.as_str(), m.embedding_variance)).collect()).collect();
    let mut shared: BTreeSet<&str> = per_encoder[0].keys().copied().collect();
    for m in &per_encoder[1..] {
        shared.retain(|s| m.contains_key(s));
    }
    if shared.len() < 3 {
        return Err(QcError::TooFewShared(shared.len()));
    }
    let vectors: Vec<Vec<f64>> = per_encoder.iter().map(|m| shared.iter().map(|s| m[s]).collect()).collect();
    let k = vectors.len();
    let mut r = vec![vec![None; k]; k];
    for i in 0..k {
        r[i][i] = Some(1.0);
        for j in i + 1..k {
            let v = pearson(&vectors[i], &vectors[j]);
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    Ok(CorrelationMatrix {
        encoders: metadata.keys().cloned().collect(),
        shared_slides: shared.into_iter().map(String::from).collect(),
        r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_relations() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let c: Vec<f64> = a.iter().map(|x| 10.0 - 3.0 * x).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[3.0; 4]), None);
    }
}
