//! On-disk artifact formats.
//!
//! Every stage of the pipeline exchanges data only through the types in this
//! module: tile manifests (CSV), embedding tensors (`.emb` binary with a
//! SHA-256 trailer), embedding metadata sidecars (JSON), label manifests
//! (CSV) and split manifests (CSV). The layouts are documented in
//! `docs/formats.md`.

mod embedding;
mod labels;
mod metadata;
mod slide;
mod splits;
mod tiles;

use std::io;
use std::path::{Path, PathBuf};

pub use embedding::{
    read_artifact, read_artifact_bytes, read_header, write_artifact, EmbeddingArtifact, EmbeddingHeader,
    EMB_FORMAT_VERSION, EMB_MAGIC,
};
pub use labels::{read_labels_csv, write_labels_csv, EvidenceLevel, LabelManifest, LabelRow};
pub use metadata::{read_metadata, write_metadata, EmbeddingMetadata, QcStatus};
pub use slide::{Preparation, ResolutionSidecar, SlideRecord, Stain};
pub use splits::{read_splits_csv, write_splits_csv, Assignment, SplitManifest};
pub use tiles::{read_manifest_csv, write_manifest_csv, TileManifest, TileRow, TILE_MANIFEST_COLUMNS};

/// Errors raised while reading, writing or validating an artifact.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes: not an embedding artifact")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },
    #[error("truncated artifact (partial feature extraction): expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected header: expected `{expected}`, found `{found}`")]
    UnexpectedHeader { expected: String, found: String },
    #[error("line {line}: invalid `{field}` value `{value}`")]
    InvalidValue { line: u64, field: &'static str, value: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// Appends `suffix` to the full file name (`a.emb` + `.meta.json` → `a.emb.meta.json`).
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

/// Sidecar path for an embedding file.
pub fn metadata_path(emb_path: &Path) -> PathBuf {
    with_suffix(emb_path, ".meta.json")
}

/// Suffix appended to artifacts that failed integrity checks.
pub const FAILED_SUFFIX: &str = ".FAILED";

/// Marks an artifact as failed by renaming it (and its sidecar, when present)
/// with the [`FAILED_SUFFIX`]. Returns the new path.
pub fn mark_failed(path: &Path) -> io::Result<PathBuf> {
    let failed = with_suffix(path, FAILED_SUFFIX);
    std::fs::rename(path, &failed)?;
    let sidecar = metadata_path(path);
    if sidecar.exists() {
        std::fs::rename(&sidecar, with_suffix(&sidecar, FAILED_SUFFIX))?;
    }
    Ok(failed)
}

pub(crate) fn csv_header_check(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for col in expected {
        if !found.iter().any(|c| c == *col) {
            return Err(FormatError::MissingColumn((*col).to_string()));
        }
    }
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != *b) {
        return Err(FormatError::UnexpectedHeader {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    field: &'static str,
) -> Result<T> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(idx).unwrap_or("");
    raw.trim().parse().map_err(|_| FormatError::InvalidValue { line, field, value: raw.to_string() })
}
