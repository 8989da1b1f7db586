use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{FormatError, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcStatus {
    Pass,
    FlaggedLowVariance,
    FailedCardinality,
    FailedChecksum,
    /// NaN or Inf entries in the tensor.
    FailedNonfinite,
}

impl QcStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QcStatus::Pass => "pass",
            QcStatus::FlaggedLowVariance => "flagged_low_variance",
            QcStatus::FailedCardinality => "failed_cardinality",
            QcStatus::FailedChecksum => "failed_checksum",
            QcStatus::FailedNonfinite => "failed_nonfinite",
        }
    }

    pub fn is_pass(self) -> bool {
        self == QcStatus::Pass
    }
}

impl fmt::Display for QcStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QcStatus {
    type Err = FormatError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pass" => QcStatus::Pass,
            "flagged_low_variance" => QcStatus::FlaggedLowVariance,
            "failed_cardinality" => QcStatus::FailedCardinality,
            "failed_checksum" => QcStatus::FailedChecksum,
            "failed_nonfinite" => QcStatus::FailedNonfinite,
            other => return Err(FormatError::Malformed(format!("unknown qc status `{other}`"))),
        })
    }
}

/// JSON sidecar stored next to every `.emb` file. Field order is the
/// serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetadata {
    pub format_version: u32,
    pub slide_id: String,
    pub encoder_id: String,
    pub encoder_version: String,
    pub extraction_timestamp: DateTime<Utc>,
    /// Hex SHA-256 of the `.emb` header and payload (the sidecar is not covered).
    pub checksum: String,
    pub n_tiles: u64,
    pub dim: u32,
    pub embedding_variance: f64,
    pub norm_min: f64,
    pub norm_max: f64,
    pub nan_fraction: f64,
    pub inf_fraction: f64,
    pub near_duplicate_estimate: f64,
    pub qc_status: QcStatus,
}

impl EmbeddingMetadata {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn validate(&self) -> Result<()> {
        if self.norm_min > self.norm_max {
            return Err(FormatError::Invariant("norm_min > norm_max".into()));
        }
        if self.embedding_variance < 0.0 {
            return Err(FormatError::Invariant("negative embedding_variance".into()));
        }
        for (name, v) in [
            ("nan_fraction", self.nan_fraction),
            ("inf_fraction", self.inf_fraction),
            ("near_duplicate_estimate", self.near_duplicate_estimate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FormatError::Invariant(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.qc_status.is_pass() && (self.nan_fraction > 0.0 || self.inf_fraction > 0.0) {
            return Err(FormatError::Invariant("pass status with non-finite entries".into()));
        }
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

pub fn write_metadata(meta: &EmbeddingMetadata, path: &Path) -> Result<()> {
    meta.validate()?;
    write_atomic(path, &meta.to_json_bytes()?)?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<EmbeddingMetadata> {
    let meta: EmbeddingMetadata = serde_json::from_slice(&std::fs::read(path)?)?;
    meta.validate()?;
    Ok(meta)
}
