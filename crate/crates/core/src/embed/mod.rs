//! Per-slide embedding artifacts: a deterministic stub encoder, ingestion of
//! externally computed tensors, and the summary statistics written to every
//! metadata sidecar.

mod stats;
mod stub;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use stats::{compute_metadata, compute_metadata_with, is_low_variance, MetadataConfig};
pub use stub::{stub_encode, stub_encode_image, PATCH_SIDE};

use crate::formats::{EmbeddingArtifact, EmbeddingHeader, FormatError, TileManifest};
use crate::tiler::TilingError;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("manifest does not match slide: {0}")]
    Mismatch(String),
    #[error("dimension mismatch: encoder expects {expected}, input has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unparseable raw tensor: {0}")]
    Unparseable(String),
    #[error("artifact for slide {0} has no tiles")]
    EmptyArtifact(String),
    #[error("encoder {0} is not a {1} encoder")]
    WrongKind(String, &'static str),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Stub,
    Ingested,
}

/// A frozen tile encoder. The dimension is fixed per `encoder_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub encoder_id: String,
    #[serde(default = "default_version")]
    pub encoder_version: String,
    pub dim: usize,
    pub kind: EncoderKind,
}

fn default_version() -> String {
    "1".into()
}

impl EncoderSpec {
    pub fn stub(encoder_id: &str, dim: usize) -> Self {
        EncoderSpec { encoder_id: encoder_id.into(), encoder_version: default_version(), dim, kind: EncoderKind::Stub }
    }

    pub fn ingested(encoder_id: &str, dim: usize) -> Self {
        EncoderSpec { kind: EncoderKind::Ingested, ..EncoderSpec::stub(encoder_id, dim) }
    }
}

/// Provenance timestamp: `SOURCE_DATE_EPOCH` when set, else `fallback`.
pub(crate) fn provenance_timestamp(fallback: impl FnOnce() -> i64) -> i64 {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()).unwrap_or_else(fallback)
}

/// Wraps a headerless little-endian f32 tensor (`rows × dim`, row-major) into
/// the canonical artifact format. The row count is recorded as given; whether
/// it matches the manifest is for QC to decide.
pub fn ingest_embeddings(
    raw_path: &Path,
    manifest: &TileManifest,
    spec: &EncoderSpec,
    rows: usize,
    dim: usize,
) -> Result<EmbeddingArtifact, EmbedError> {
    if dim != spec.dim {
        return Err(EmbedError::DimMismatch { expected: spec.dim, found: dim });
    }
    if dim == 0 {
        return Err(EmbedError::Unparseable("dimension must be at least 1".into()));
    }
    let bytes = std::fs::read(raw_path)?;
    let expected = rows
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| EmbedError::Unparseable("tensor size overflows".into()))?;
    if bytes.len() != expected {
        return Err(EmbedError::Unparseable(format!(
            "{} holds {} bytes, expected {rows}x{dim}x4 = {expected}",
            raw_path.display(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let header = EmbeddingHeader {
        slide_id: manifest.slide_id.clone(),
        encoder_id: spec.encoder_id.clone(),
        encoder_version: spec.encoder_version.clone(),
        n_tiles: rows as u64,
        dim: dim as u32,
        extraction_timestamp: provenance_timestamp(|| chrono::Utc::now().timestamp()),
    };
    Ok(EmbeddingArtifact::new(header, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::TileRow;

    fn manifest(n: u32) -> TileManifest {
        TileManifest {
            slide_id: "S".into(),
            mpp: 0.5,
            tile_px: 256,
            rows: (0..n).map(|i| TileRow { index: i, x: i * 257, y: 0, fraction_tissue: 1.0 }).collect(),
        }
    }

    fn raw_file(dir: &Path, rows: usize, dim: usize) -> std::path::PathBuf {
        let path = dir.join("raw.f32");
        let bytes: Vec<u8> = (0..rows * dim).flat_map(|i| (i as f32).to_le_bytes()).collect();
        std::fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn ingest_records_rows_as_given() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::ingested("uni", 8);
        let a = ingest_embeddings(&raw_file(dir.path(), 12, 8), &manifest(12), &spec, 12, 8).unwrap();
        assert_eq!(a.header.n_tiles, 12);
        let short = ingest_embeddings(&raw_file(dir.path(), 11, 8), &manifest(12), &spec, 11, 8).unwrap();
        assert_eq!(short.header.n_tiles, 11);
    }

    #[test]
    fn ingest_rejects_wrong_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::ingested("uni", 1024);
        let err = ingest_embeddings(&raw_file(dir.path(), 2, 1536), &manifest(2), &spec, 2, 1536).unwrap_err();
        assert!(matches!(err, EmbedError::DimMismatch { expected: 1024, found: 1536 }));
    }

    #[test]
    fn ingest_rejects_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec::ingested("uni", 8);
        let err = ingest_embeddings(&raw_file(dir.path(), 3, 8), &manifest(4), &spec, 4, 8).unwrap_err();
        assert!(matches!(err, EmbedError::Unparseable(_)));
    }
}
