use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CheckpointKind, GmaError};
use crate::io::write_atomic;

const COLUMNS: [&str; 4] = ["slide_id", "tile_index", "attention", "checkpoint_kind"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub slide_id: String,
    pub tile_index: u32,
    pub attention: f64,
}

/// Per-tile attention aligned to tile manifests, for one checkpoint kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub checkpoint_kind: CheckpointKind,
    pub rows: Vec<AttentionRow>,
}

impl AttentionExport {
    pub fn for_slide<'a>(&'a self, slide_id: &'a str) -> impl Iterator<Item = &'a AttentionRow> + 'a {
        self.rows.iter().filter(move |r| r.slide_id == slide_id)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, GmaError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        let kind = self.checkpoint_kind.to_string();
        for r in &self.rows {
            w.write_record([r.slide_id.as_str(), &r.tile_index.to_string(), &r.attention.to_string(), &kind])?;
        }
        w.into_inner().map_err(|e| GmaError::Io(e.into_error()))
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, GmaError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != COLUMNS {
            return Err(GmaError::Weights(format!("unexpected attention header {headers:?}")));
        }
        let mut kind = None;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse_err = || GmaError::Weights(format!("bad attention row {rec:?}"));
            let k: CheckpointKind = rec[3].parse().map_err(|_| parse_err())?;
            if kind.is_some_and(|prev| prev != k) {
                return Err(GmaError::Weights("mixed checkpoint kinds in one export".into()));
            }
            kind = Some(k);
            rows.push(AttentionRow {
                slide_id: rec[0].to_string(),
                tile_index: rec[1].parse().map_err(|_| parse_err())?,
                attention: rec[2].parse().map_err(|_| parse_err())?,
            });
        }
        Ok(AttentionExport { checkpoint_kind: kind.unwrap_or(CheckpointKind::BestAuc), rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GmaError> {
        write_atomic(path, &self.to_csv_bytes()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, GmaError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}
