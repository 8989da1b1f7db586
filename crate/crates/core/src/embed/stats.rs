//! Summary statistics stored in the metadata sidecar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbedError;
use crate::formats::{EmbeddingArtifact, EmbeddingMetadata, QcStatus};

/// Thresholds used when summarizing an embedding tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataConfig {
    /// Flag when `embedding_variance <= ratio * mean squared row norm`.
    pub low_variance_ratio: f64,
    pub near_duplicate_pairs: usize,
    pub near_duplicate_cosine: f64,
}

impl Default for MetadataConfig {
    fn default() -> Self {
        MetadataConfig { low_variance_ratio: 1e-6, near_duplicate_pairs: 1024, near_duplicate_cosine: 0.999 }
    }
}

pub fn compute_metadata(artifact: &EmbeddingArtifact) -> Result<EmbeddingMetadata, EmbedError> {
    compute_metadata_with(artifact, &MetadataConfig::default())
}

pub fn compute_metadata_with(
    artifact: &EmbeddingArtifact,
    cfg: &MetadataConfig,
) -> Result<EmbeddingMetadata, EmbedError> {
    artifact.validate()?;
    let n = artifact.n_tiles();
    let d = artifact.dim();
    if n == 0 {
        return Err(EmbedError::EmptyArtifact(artifact.header.slide_id.clone()));
    }

    // Welford per dimension over finite entries; O(D) state.
    let mut count = vec![0u64; d];
    let mut mean = vec![0f64; d];
    let mut m2 = vec![0f64; d];
    let mut nan = 0u64;
    let mut inf = 0u64;
    let mut norm_min = f64::INFINITY;
    let mut norm_max = f64::NEG_INFINITY;
    let mut sq_norm_sum = 0f64;
    for row in artifact.rows() {
        let mut sq = 0f64;
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                nan += 1;
                continue;
            }
            if v.is_infinite() {
                inf += 1;
                continue;
            }
            let x = f64::from(v);
            sq += x * x;
            count[j] += 1;
            let delta = x - mean[j];
            mean[j] += delta / count[j] as f64;
            m2[j] += delta * (x - mean[j]);
        }
        let norm = sq.sqrt();
        norm_min = norm_min.min(norm);
        norm_max = norm_max.max(norm);
        sq_norm_sum += sq;
    }
    let embedding_variance =
        m2.iter().zip(&count).map(|(&m, &c)| if c == 0 { 0.0 } else { m / c as f64 }).sum::<f64>() / d as f64;
    let total = (n * d) as f64;
    let nan_fraction = nan as f64 / total;
    let inf_fraction = inf as f64 / total;
    let mean_sq_norm = sq_norm_sum / n as f64;
    let low_variance = embedding_variance <= cfg.low_variance_ratio * mean_sq_norm;

    let qc_status = if nan > 0 || inf > 0 {
        QcStatus::FailedNonfinite
    } else if low_variance {
        QcStatus::FlaggedLowVariance
    } else {
        QcStatus::Pass
    };

    Ok(EmbeddingMetadata {
        format_version: EmbeddingMetadata::FORMAT_VERSION,
        slide_id: artifact.header.slide_id.clone(),
        encoder_id: artifact.header.encoder_id.clone(),
        encoder_version: artifact.header.encoder_version.clone(),
        extraction_timestamp: artifact.header.timestamp(),
        checksum: artifact.checksum()?,
        n_tiles: artifact.header.n_tiles,
        dim: artifact.header.dim,
        embedding_variance,
        norm_min,
        norm_max,
        nan_fraction,
        inf_fraction,
        near_duplicate_estimate: near_duplicate_estimate(artifact, cfg),
        qc_status,
    })
}

/// Whether the statistics indicate a degenerate (near-constant) tensor.
pub fn is_low_variance(meta: &EmbeddingMetadata) -> bool {
    meta.qc_status == QcStatus::FlaggedLowVariance
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na.sqrt() * nb.sqrt()),
    }
}

/// Fraction of tile pairs whose cosine similarity exceeds the threshold.
/// Small slides are enumerated exhaustively; larger ones sample pairs with an
/// RNG seeded from the artifact identity.
fn near_duplicate_estimate(artifact: &EmbeddingArtifact, cfg: &MetadataConfig) -> f64 {
    let n = artifact.n_tiles();
    if n < 2 || cfg.near_duplicate_pairs == 0 {
        return 0.0;
    }
    let is_dup = |i: usize, j: usize| cosine(artifact.row(i), artifact.row(j)) > cfg.near_duplicate_cosine;
    let total_pairs = n as u128 * (n as u128 - 1) / 2;
    if total_pairs <= cfg.near_duplicate_pairs as u128 {
        let mut dups = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                dups += usize::from(is_dup(i, j));
            }
        }
        return dups as f64 / total_pairs as f64;
    }
    let seed_src = format!("{}\0{}", artifact.header.slide_id, artifact.header.encoder_id);
    let digest = crate::io::sha256_hex(seed_src.as_bytes());
    let seed = u64::from_str_radix(&digest[..16], 16).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dups = 0usize;
    for _ in 0..cfg.near_duplicate_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        dups += usize::from(is_dup(i, j));
    }
    dups as f64 / cfg.near_duplicate_pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::EmbeddingHeader;

    fn artifact(n: u64, d: u32, data: Vec<f32>) -> EmbeddingArtifact {
        EmbeddingArtifact::new(
            EmbeddingHeader {
                slide_id: "s".into(),
                encoder_id: "e".into(),
                encoder_version: "1".into(),
                n_tiles: n,
                dim: d,
                extraction_timestamp: 0,
            },
            data,
        )
        .unwrap()
    }

    #[test]
    fn two_tiles_population_variance() {
        let m = compute_metadata(&artifact(2, 1, vec![0.0, 2.0])).unwrap();
        assert_eq!(m.embedding_variance, 1.0);
        assert_eq!((m.norm_min, m.norm_max), (0.0, 2.0));
    }

    #[test]
    fn identical_rows_are_duplicates_with_zero_variance() {
        let row = [0.3f32, -1.0, 2.5];
        let data: Vec<f32> = (0..20).flat_map(|_| row).collect();
        let m = compute_metadata(&artifact(20, 3, data)).unwrap();
        assert_eq!(m.embedding_variance, 0.0);
        assert_eq!(m.near_duplicate_estimate, 1.0);
        assert_eq!(m.qc_status, QcStatus::FlaggedLowVariance);
    }

    #[test]
    fn sampled_duplicates_on_large_slides() {
        let row = [1.0f32, 2.0];
        let data: Vec<f32> = (0..100).flat_map(|_| row).collect();
        let m = compute_metadata(&artifact(100, 2, data)).unwrap();
        assert_eq!(m.near_duplicate_estimate, 1.0);
    }

    #[test]
    fn one_nan_in_ten_by_ten() {
        let mut data: Vec<f32> = (0..100).map(|i| i as f32).collect();
        data[37] = f32::NAN;
        let m = compute_metadata(&artifact(10, 10, data)).unwrap();
        assert_eq!(m.nan_fraction, 0.01);
        assert_eq!(m.inf_fraction, 0.0);
        assert_eq!(m.qc_status, QcStatus::FailedNonfinite);
        assert!(m.embedding_variance.is_finite());
    }

    #[test]
    fn empty_artifact_is_an_error() {
        assert!(matches!(compute_metadata(&artifact(0, 4, vec![])), Err(EmbedError::EmptyArtifact(_))));
    }

    #[test]
    fn spread_rows_pass() {
        let data: Vec<f32> = (0..64).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let m = compute_metadata(&artifact(16, 4, data)).unwrap();
        assert_eq!(m.qc_status, QcStatus::Pass);
        assert!(m.near_duplicate_estimate < 1.0);
    }
}
