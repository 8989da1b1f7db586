//! Integrity gating: tile-feature cardinality, checksum verification,
//! variance flagging, fail-closed run manifests and cross-encoder variance
//! correlation.

mod correlation;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlation::{pearson, variance_correlation, CorrelationMatrix};

use crate::embed::{compute_metadata_with, MetadataConfig};
use crate::formats::{
    metadata_path, read_artifact_bytes, read_header, read_metadata, with_suffix, EmbeddingHeader, FormatError,
    QcStatus, TileManifest, FAILED_SUFFIX,
};
use crate::io::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum QcError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("run refused for task {task_id}: no artifact for {}", .slides.join(", "))]
    MissingArtifacts { task_id: String, slides: Vec<String> },
    #[error("need at least 3 shared slides, found {0}")]
    TooFewShared(usize),
    #[error("need at least 2 encoders, found {0}")]
    TooFewEncoders(usize),
    #[error("correlation undefined between {a} and {b}: zero-variance vector")]
    UndefinedCorrelation { a: String, b: String },
    #[error("QC report: {0}")]
    Report(String),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// True iff the artifact header's row count equals the manifest's.
///
/// Reads only the header from `reader`.
pub fn check_cardinality<R: Read>(manifest: &TileManifest, reader: &mut R) -> Result<bool, QcError> {
    let header = read_header(reader)?;
    Ok(header.n_tiles == manifest.len() as u64)
}

pub fn check_cardinality_path(manifest: &TileManifest, emb_path: &Path) -> Result<bool, QcError> {
    check_cardinality(manifest, &mut BufReader::new(File::open(emb_path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcRow {
    pub slide_id: String,
    pub encoder_id: String,
    pub cardinality_ok: bool,
    pub checksum_ok: bool,
    pub variance_flag: bool,
    pub status: QcStatus,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcSummary {
    pub n_pass: usize,
    pub n_fail: usize,
}

impl QcSummary {
    pub fn total(&self) -> usize {
        self.n_pass + self.n_fail
    }

    /// `None` for an empty report.
    pub fn pass_rate(&self) -> Option<f64> {
        (self.total() > 0).then(|| self.n_pass as f64 / self.total() as f64)
    }
}

impl fmt::Display for QcSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pass_rate() {
            Some(r) => write!(f, "{}/{} ({:.2}%)", self.n_pass, self.total(), r * 100.0),
            None => f.write_str("0/0"),
        }
    }
}

pub const QC_REPORT_COLUMNS: [&str; 7] =
    ["slide_id", "encoder_id", "cardinality_ok", "checksum_ok", "variance_flag", "status", "reason"];

/// Per (slide, encoder) QC outcome. Rows are kept sorted by encoder then slide.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QcReport {
    pub rows: Vec<QcRow>,
    /// (slide_id, encoder_id) pairs for which no artifact file exists.
    #[serde(default)]
    pub missing: Vec<(String, String)>,
}

impl QcReport {
    pub fn new(mut rows: Vec<QcRow>, mut missing: Vec<(String, String)>) -> Self {
        rows.sort_by(|a, b| (&a.encoder_id, &a.slide_id).cmp(&(&b.encoder_id, &b.slide_id)));
        missing.sort_by(|a, b| (&a.1, &a.0).cmp(&(&b.1, &b.0)));
        QcReport { rows, missing }
    }

    pub fn summary(&self) -> QcSummary {
        let n_pass = self.rows.iter().filter(|r| r.status.is_pass()).count();
        QcSummary { n_pass, n_fail: self.rows.len() - n_pass }
    }

    pub fn summary_for(&self, encoder_id: &str) -> QcSummary {
        let rows = self.rows.iter().filter(|r| r.encoder_id == encoder_id);
        let (pass, fail): (Vec<_>, Vec<_>) = rows.partition(|r| r.status.is_pass());
        QcSummary { n_pass: pass.len(), n_fail: fail.len() }
    }

    pub fn get(&self, slide_id: &str, encoder_id: &str) -> Option<&QcRow> {
        self.rows.iter().find(|r| r.slide_id == slide_id && r.encoder_id == encoder_id)
    }

    pub fn passing(&self, encoder_id: &str) -> HashSet<String> {
        self.rows
            .iter()
            .filter(|r| r.encoder_id == encoder_id && r.status.is_pass())
            .map(|r| r.slide_id.clone())
            .collect()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, QcError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(QC_REPORT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.slide_id.as_str(),
                &r.encoder_id,
                &r.cardinality_ok.to_string(),
                &r.checksum_ok.to_string(),
                &r.variance_flag.to_string(),
                r.status.as_str(),
                &r.reason,
            ])?;
        }
        w.into_inner().map_err(|e| QcError::Io(e.into_error()))
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, QcError> {
        let mut r = csv::Reader::from_reader(reader);
        if r.headers()?.iter().ne(QC_REPORT_COLUMNS) {
            return Err(QcError::Report(format!("unexpected header {:?}", r.headers()?)));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let flag =
                |i: usize| rec[i].parse::<bool>().map_err(|_| QcError::Report(format!("bad boolean `{}`", &rec[i])));
            rows.push(QcRow {
                slide_id: rec[0].to_string(),
                encoder_id: rec[1].to_string(),
                cardinality_ok: flag(2)?,
                checksum_ok: flag(3)?,
                variance_flag: flag(4)?,
                status: rec[5].parse().map_err(|e| QcError::Report(format!("{e}")))?,
                reason: rec[6].to_string(),
            });
        }
        Ok(QcReport::new(rows, Vec::new()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), QcError> {
        write_atomic(path, &self.to_csv_bytes()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, QcError> {
        Self::from_csv_reader(File::open(path)?)
    }
}

/// One artifact to audit.
#[derive(Debug, Clone)]
pub struct QcTarget {
    pub slide_id: String,
    pub encoder_id: String,
    /// `None` when the slide has no tile manifest.
    pub manifest: Option<TileManifest>,
    pub emb_path: PathBuf,
}

/// The path QC should read: the live artifact, else a previously failed one.
pub fn resolve_artifact(emb_path: &Path) -> Option<PathBuf> {
    if emb_path.exists() {
        return Some(emb_path.to_path_buf());
    }
    let failed = with_suffix(emb_path, FAILED_SUFFIX);
    failed.exists().then_some(failed)
}

fn header_of(bytes: &[u8]) -> Result<EmbeddingHeader, FormatError> {
    let mut cursor = bytes;
    read_header(&mut cursor)
}

/// Runs all checks on one artifact file. Returns `Ok(None)` if no artifact
/// exists at all.
pub fn check_artifact(target: &QcTarget, cfg: &MetadataConfig) -> Result<Option<QcRow>, QcError> {
    let Some(path) = resolve_artifact(&target.emb_path) else {
        return Ok(None);
    };
    let bytes = std::fs::read(&path)?;
    let mut row = QcRow {
        slide_id: target.slide_id.clone(),
        encoder_id: target.encoder_id.clone(),
        cardinality_ok: false,
        checksum_ok: false,
        variance_flag: false,
        status: QcStatus::FailedChecksum,
        reason: String::new(),
    };

    let header = match header_of(&bytes) {
        Ok(h) => h,
        Err(e) => {
            row.reason = format!("unreadable header: {e}");
            return Ok(Some(row));
        }
    };
    if header.slide_id != target.slide_id || header.encoder_id != target.encoder_id {
        row.reason = format!("header names {}/{}", header.slide_id, header.encoder_id);
        return Ok(Some(row));
    }
    let mut reasons = Vec::new();
    match &target.manifest {
        Some(m) => {
            row.cardinality_ok = header.n_tiles == m.len() as u64;
            if !row.cardinality_ok {
                reasons.push(format!("header N={} but manifest has {} tiles", header.n_tiles, m.len()));
            }
        }
        None => reasons.push("no tile manifest".to_string()),
    }

    let mut truncated = false;
    let artifact = match read_artifact_bytes(&bytes, true) {
        Ok(a) => {
            row.checksum_ok = true;
            Some(a)
        }
        Err(FormatError::Truncated { expected, found }) => {
            truncated = true;
            reasons.push(format!("truncated: {found} of {expected} bytes"));
            None
        }
        Err(e) => {
            reasons.push(e.to_string());
            None
        }
    };

    let mut nonfinite = false;
    if let Some(a) = &artifact {
        let sidecar = metadata_path(&path);
        let sidecar = if sidecar.exists() { sidecar } else { with_suffix(&sidecar, FAILED_SUFFIX) };
        if sidecar.exists() {
            let stored = read_metadata(&sidecar)?.checksum;
            let computed = a.checksum()?;
            if stored != computed {
                row.checksum_ok = false;
                reasons.push(format!("sidecar checksum {stored} differs from content {computed}"));
            }
        }
        if a.n_tiles() > 0 {
            let meta = compute_metadata_with(a, cfg).map_err(|e| QcError::Report(e.to_string()))?;
            nonfinite = meta.nan_fraction > 0.0 || meta.inf_fraction > 0.0;
            row.variance_flag = nonfinite || meta.qc_status == QcStatus::FlaggedLowVariance;
            if nonfinite {
                reasons.push(format!("nan {:.3e}, inf {:.3e}", meta.nan_fraction, meta.inf_fraction));
            } else if row.variance_flag {
                reasons.push(format!("low variance {:.3e}", meta.embedding_variance));
            }
        }
    }

    row.status = if truncated {
        QcStatus::FailedCardinality
    } else if !row.checksum_ok {
        QcStatus::FailedChecksum
    } else if !row.cardinality_ok {
        QcStatus::FailedCardinality
    } else if nonfinite {
        QcStatus::FailedNonfinite
    } else if row.variance_flag {
        QcStatus::FlaggedLowVariance
    } else {
        QcStatus::Pass
    };
    row.reason = reasons.join("; ");
    Ok(Some(row))
}

/// Audits every target in parallel. With `mark_failures`, non-passing
/// artifacts are renamed with the `.FAILED` suffix.
pub fn run_qc(targets: &[QcTarget], cfg: &MetadataConfig, mark_failures: bool) -> Result<QcReport, QcError> {
    let outcomes = targets
        .par_iter()
        .map(|t| {
            let row = check_artifact(t, cfg)?;
            if let Some(r) = &row {
                if mark_failures && !r.status.is_pass() && t.emb_path.exists() {
                    crate::formats::mark_failed(&t.emb_path)?;
                }
            }
            Ok((t, row))
        })
        .collect::<Result<Vec<_>, QcError>>()?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (t, row) in outcomes {
        match row {
            Some(r) => rows.push(r),
            None => missing.push((t.slide_id.clone(), t.encoder_id.clone())),
        }
    }
    Ok(QcReport::new(rows, missing))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub slide_id: String,
    pub status: QcStatus,
    pub reason: String,
}

/// The slide list a training or inference run may consume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task_id: String,
    pub split_index: Option<u32>,
    pub encoder_id: String,
    pub slides: Vec<String>,
    pub exclusions: Vec<Exclusion>,
}

impl RunManifest {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>, QcError> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// Keeps only passing slides; refuses if any labeled slide has no QC row.
pub fn build_run_manifest(
    task_id: &str,
    split_index: Option<u32>,
    encoder_id: &str,
    labeled_slides: &[&str],
    qc: &QcReport,
) -> Result<RunManifest, QcError> {
    let rows: BTreeMap<&str, &QcRow> =
        qc.rows.iter().filter(|r| r.encoder_id == encoder_id).map(|r| (r.slide_id.as_str(), r)).collect();
    let mut missing: Vec<String> =
        labeled_slides.iter().filter(|s| !rows.contains_key(**s)).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(QcError::MissingArtifacts { task_id: task_id.to_string(), slides: missing });
    }
    let mut slides = Vec::new();
    let mut exclusions = Vec::new();
    let mut sorted: Vec<&str> = labeled_slides.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for s in sorted {
        let r = rows[s];
        if r.status.is_pass() {
            slides.push(s.to_string());
        } else {
            exclusions.push(Exclusion { slide_id: s.to_string(), status: r.status, reason: r.reason.clone() });
        }
    }
    Ok(RunManifest {
        task_id: task_id.to_string(),
        split_index,
        encoder_id: encoder_id.to_string(),
        slides,
        exclusions,
    })
}
