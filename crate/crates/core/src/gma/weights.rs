//! `.gmw` weights files.
//!
//! ```text
//! 0   8  magic "GMKWTS\0\0"
//! 8   2  format version (1)
//! 10  2  flags (0)
//! 12  4  header length (multiple of 64)
//! 16  4  M
//! 20  4  L
//! 24  4  epoch
//! 28  4  split index
//! 32  8  validation AUROC (f64)
//! 40  1  checkpoint kind (0 best_auc, 1 final_epoch)
//! 42  2  task_id length
//! 44  2  encoder_id length
//! 64  .. task_id, encoder_id (UTF-8), zero padded
//! H   .. f32 blocks V, U, w, W_c, b
//!     32 SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::GmaParams;
use super::{Checkpoint, CheckpointKind, GmaError, GmaModel};
use crate::io::write_atomic;

pub const WEIGHTS_MAGIC: [u8; 8] = *b"GMKWTS\0\0";
pub const WEIGHTS_FORMAT_VERSION: u16 = 1;

impl GmaModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>, GmaError> {
        let p = &self.checkpoint.params;
        let (t, e) = (self.task_id.as_bytes(), self.encoder_id.as_bytes());
        if t.len() > u16::MAX as usize || e.len() > u16::MAX as usize {
            return Err(GmaError::Weights("identifier too long".into()));
        }
        let header_len = 64 + (t.len() + e.len()).div_ceil(64) * 64;
        let mut buf = vec![0u8; header_len];
        buf[0..8].copy_from_slice(&WEIGHTS_MAGIC);
        buf[8..10].copy_from_slice(&WEIGHTS_FORMAT_VERSION.to_le_bytes());
        buf[12..16].copy_from_slice(&(header_len as u32).to_le_bytes());
        buf[16..20].copy_from_slice(&(p.m as u32).to_le_bytes());
        buf[20..24].copy_from_slice(&(p.l as u32).to_le_bytes());
        buf[24..28].copy_from_slice(&self.checkpoint.epoch.to_le_bytes());
        buf[28..32].copy_from_slice(&self.split_index.to_le_bytes());
        buf[32..40].copy_from_slice(&self.checkpoint.val_auroc.to_le_bytes());
        buf[40] = match self.checkpoint.kind {
            CheckpointKind::BestAuc => 0,
            CheckpointKind::FinalEpoch => 1,
        };
        buf[42..44].copy_from_slice(&(t.len() as u16).to_le_bytes());
        buf[44..46].copy_from_slice(&(e.len() as u16).to_le_bytes());
        buf[64..64 + t.len()].copy_from_slice(t);
        buf[64 + t.len()..64 + t.len() + e.len()].copy_from_slice(e);
        for x in p.to_flat() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GmaError> {
        let bad = |msg: &str| GmaError::Weights(msg.to_string());
        if bytes.len() < 64 + 32 {
            return Err(bad("file too short"));
        }
        if bytes[0..8] != WEIGHTS_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != WEIGHTS_FORMAT_VERSION {
            return Err(GmaError::Weights(format!("unsupported version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header_len = u32_at(12) as usize;
        let m = u32_at(16) as usize;
        let l = u32_at(20) as usize;
        let epoch = u32_at(24);
        let split_index = u32_at(28);
        let val_auroc = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let kind = match bytes[40] {
            0 => CheckpointKind::BestAuc,
            1 => CheckpointKind::FinalEpoch,
            k => return Err(GmaError::Weights(format!("unknown checkpoint kind {k}"))),
        };
        let tl = u16::from_le_bytes([bytes[42], bytes[43]]) as usize;
        let el = u16::from_le_bytes([bytes[44], bytes[45]]) as usize;
        if header_len != 64 + (tl + el).div_ceil(64) * 64 {
            return Err(bad("inconsistent header length"));
        }
        let n_params = 2 * l * m + l + m + 1;
        let expected = header_len + n_params * 4 + 32;
        if bytes.len() != expected {
            return Err(GmaError::Weights(format!(
                "expected {expected} bytes for M={m}, L={l}, found {}",
                bytes.len()
            )));
        }
        let body = &bytes[..expected - 32];
        if Sha256::digest(body)[..] != bytes[expected - 32..] {
            return Err(bad("checksum mismatch"));
        }
        let text = |r: std::ops::Range<usize>| {
            std::str::from_utf8(&bytes[r]).map(str::to_string).map_err(|_| bad("identifier is not UTF-8"))
        };
        let task_id = text(64..64 + tl)?;
        let encoder_id = text(64 + tl..64 + tl + el)?;
        let flat: Vec<f64> = bytes[header_len..expected - 32]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(GmaModel {
            task_id,
            encoder_id,
            split_index,
            checkpoint: Checkpoint { epoch, params: GmaParams::from_flat(m, l, &flat), val_auroc, kind },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GmaError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GmaError> {
        GmaModel::from_bytes(&std::fs::read(path)?)
    }
}
