//! `.emb` embedding files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8  magic "GMKEMB\0\0"
//! 8   2  format version (1)
//! 10  2  flags (0)
//! 12  4  header length in bytes (multiple of 64)
//! 16  8  N, tile count
//! 24  4  D, embedding dimension
//! 28  2  slide_id length
//! 30  2  encoder_id length
//! 32  2  encoder_version length
//! 34  6  reserved
//! 40  8  extraction timestamp, unix seconds (i64)
//! 48  16 reserved
//! 64  .. slide_id, encoder_id, encoder_version (UTF-8), zero padded
//! H   N*D*4  row-major f32 payload
//! H+P 32 SHA-256 of header and payload
//! ```

use std::io::Read;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use sha2::{Digest, Sha256};

use super::{metadata_path, FormatError, Result};
use crate::io::write_atomic;

pub const EMB_MAGIC: [u8; 8] = *b"GMKEMB\0\0";
pub const EMB_FORMAT_VERSION: u16 = 1;
const FIXED_HEADER: usize = 64;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub slide_id: String,
    pub encoder_id: String,
    pub encoder_version: String,
    pub n_tiles: u64,
    pub dim: u32,
    /// Unix seconds.
    pub extraction_timestamp: i64,
}

impl EmbeddingHeader {
    /// Total encoded header length, padded to a multiple of 64 bytes.
    pub fn encoded_len(&self) -> usize {
        let strings = self.slide_id.len() + self.encoder_id.len() + self.encoder_version.len();
        FIXED_HEADER + strings.div_ceil(64) * 64
    }

    pub fn payload_len(&self) -> Option<u64> {
        self.n_tiles.checked_mul(u64::from(self.dim))?.checked_mul(4)
    }

    pub fn timestamp(&self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.extraction_timestamp, 0).single().unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let lens = [&self.slide_id, &self.encoder_id, &self.encoder_version].map(|s| u16::try_from(s.len()));
        let [Ok(l0), Ok(l1), Ok(l2)] = lens else {
            return Err(FormatError::Invariant("identifier longer than 65535 bytes".into()));
        };
        let len = self.encoded_len();
        let mut buf = vec![0u8; len];
        buf[0..8].copy_from_slice(&EMB_MAGIC);
        buf[8..10].copy_from_slice(&EMB_FORMAT_VERSION.to_le_bytes());
        buf[12..16].copy_from_slice(&(len as u32).to_le_bytes());
        buf[16..24].copy_from_slice(&self.n_tiles.to_le_bytes());
        buf[24..28].copy_from_slice(&self.dim.to_le_bytes());
        buf[28..30].copy_from_slice(&l0.to_le_bytes());
        buf[30..32].copy_from_slice(&l1.to_le_bytes());
        buf[32..34].copy_from_slice(&l2.to_le_bytes());
        buf[40..48].copy_from_slice(&self.extraction_timestamp.to_le_bytes());
        let mut off = FIXED_HEADER;
        for s in [&self.slide_id, &self.encoder_id, &self.encoder_version] {
            buf[off..off + s.len()].copy_from_slice(s.as_bytes());
            off += s.len();
        }
        Ok(buf)
    }

    /// Parses the fixed 64-byte block; returns the header length and string lengths.
    fn parse_fixed(fixed: &[u8; FIXED_HEADER]) -> Result<(usize, [usize; 3], u64, u32, i64)> {
        if fixed[0..8] != EMB_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = u16::from_le_bytes([fixed[8], fixed[9]]);
        if version != EMB_FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { found: version, expected: EMB_FORMAT_VERSION });
        }
        let header_len = u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(fixed[16..24].try_into().unwrap());
        let d = u32::from_le_bytes(fixed[24..28].try_into().unwrap());
        let lens = [
            u16::from_le_bytes([fixed[28], fixed[29]]) as usize,
            u16::from_le_bytes([fixed[30], fixed[31]]) as usize,
            u16::from_le_bytes([fixed[32], fixed[33]]) as usize,
        ];
        let ts = i64::from_le_bytes(fixed[40..48].try_into().unwrap());
        let expected_len = FIXED_HEADER + lens.iter().sum::<usize>().div_ceil(64) * 64;
        if header_len != expected_len {
            return Err(FormatError::Malformed(format!(
                "header length {header_len} inconsistent with identifier lengths (expected {expected_len})"
            )));
        }
        if d == 0 {
            return Err(FormatError::Malformed("embedding dimension is zero".into()));
        }
        Ok((header_len, lens, n, d, ts))
    }

    fn from_parts(lens: [usize; 3], strings: &[u8], n: u64, d: u32, ts: i64) -> Result<Self> {
        let mut off = 0;
        let mut out = Vec::with_capacity(3);
        for len in lens {
            let s = std::str::from_utf8(&strings[off..off + len])
                .map_err(|_| FormatError::Malformed("identifier is not UTF-8".into()))?;
            out.push(s.to_string());
            off += len;
        }
        let encoder_version = out.pop().unwrap();
        let encoder_id = out.pop().unwrap();
        let slide_id = out.pop().unwrap();
        Ok(EmbeddingHeader { slide_id, encoder_id, encoder_version, n_tiles: n, dim: d, extraction_timestamp: ts })
    }
}

/// Per-slide feature tensor: `n_tiles × dim` row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArtifact {
    pub header: EmbeddingHeader,
    pub data: Vec<f32>,
}

impl EmbeddingArtifact {
    pub fn new(header: EmbeddingHeader, data: Vec<f32>) -> Result<Self> {
        let artifact = EmbeddingArtifact { header, data };
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.dim == 0 {
            return Err(FormatError::Invariant("embedding dimension must be >= 1".into()));
        }
        let expected = self.header.n_tiles as u128 * u128::from(self.header.dim);
        if expected != self.data.len() as u128 {
            return Err(FormatError::Invariant(format!(
                "header declares {}x{} but tensor holds {} values",
                self.header.n_tiles,
                self.header.dim,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.header.n_tiles as usize
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim())
    }

    /// Canonical encoding: header, payload, digest trailer.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, String)> {
        self.validate()?;
        let mut buf = self.header.encode()?;
        buf.reserve(self.data.len() * 4 + DIGEST_LEN);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok((buf, hex::encode(digest)))
    }

    /// Hex SHA-256 over the canonical header and payload.
    pub fn checksum(&self) -> Result<String> {
        self.to_bytes().map(|(_, c)| c)
    }
}

/// Writes `artifact` to `path` and its metadata sidecar to `<path>.meta.json`.
/// Both files appear atomically. Returns the hex checksum.
pub fn write_artifact(artifact: &EmbeddingArtifact, path: &Path) -> Result<String> {
    let (bytes, checksum) = artifact.to_bytes()?;
    write_atomic(path, &bytes)?;
    let metadata = crate::embed::compute_metadata(artifact).map_err(|e| FormatError::Invariant(e.to_string()))?;
    super::write_metadata(&metadata, &metadata_path(path))?;
    Ok(checksum)
}

/// Reads only the header block. Never touches the payload.
pub fn read_header<R: Read>(reader: &mut R) -> Result<EmbeddingHeader> {
    let mut fixed = [0u8; FIXED_HEADER];
    reader.read_exact(&mut fixed).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FormatError::Truncated { expected: FIXED_HEADER as u64, found: 0 },
        _ => FormatError::Io(e),
    })?;
    let (header_len, lens, n, d, ts) = EmbeddingHeader::parse_fixed(&fixed)?;
    let mut strings = vec![0u8; header_len - FIXED_HEADER];
    reader.read_exact(&mut strings).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            FormatError::Truncated { expected: header_len as u64, found: FIXED_HEADER as u64 }
        }
        _ => FormatError::Io(e),
    })?;
    EmbeddingHeader::from_parts(lens, &strings, n, d, ts)
}

pub fn read_artifact_bytes(bytes: &[u8], verify: bool) -> Result<EmbeddingArtifact> {
    let mut cursor = bytes;
    let header = read_header(&mut cursor)?;
    let header_len = header.encoded_len() as u64;
    let payload_len = header.payload_len().ok_or_else(|| FormatError::Malformed("payload size overflows".into()))?;
    let expected = header_len + payload_len + DIGEST_LEN as u64;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(FormatError::Truncated { expected, found });
    }
    if found > expected {
        return Err(FormatError::Malformed(format!("{} trailing bytes after digest", found - expected)));
    }
    let body_end = (header_len + payload_len) as usize;
    if verify {
        let computed = hex::encode(Sha256::digest(&bytes[..body_end]));
        let stored = hex::encode(&bytes[body_end..]);
        if computed != stored {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
    }
    let data = bytes[header_len as usize..body_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(EmbeddingArtifact { header, data })
}

pub fn read_artifact(path: &Path, verify: bool) -> Result<EmbeddingArtifact> {
    read_artifact_bytes(&std::fs::read(path)?, verify)
}
