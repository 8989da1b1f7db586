use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{csv_header_check, parse_field, FormatError, Result};
use crate::io::write_atomic;

/// Exact column set of a tile manifest, in order.
pub const TILE_MANIFEST_COLUMNS: [&str; 7] = ["slide_id", "tile_index", "x", "y", "tile_px", "mpp", "fraction_tissue"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileRow {
    pub index: u32,
    /// Top-left corner in native slide pixels.
    pub x: u32,
    pub y: u32,
    pub fraction_tissue: f64,
}

/// Ordered tile grid for one slide. Row `i` of the slide's embedding tensor
/// corresponds to the tile with `index == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub slide_id: String,
    pub mpp: f64,
    pub tile_px: u32,
    pub rows: Vec<TileRow>,
}

impl TileManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Checks the structural invariants against the slide raster bounds and the
    /// configured inclusion threshold.
    pub fn validate(&self, width_px: u32, height_px: u32, min_fraction: f64) -> Result<()> {
        let tile = u64::from(self.tile_px);
        let mut prev: Option<(u32, u32)> = None;
        for (i, row) in self.rows.iter().enumerate() {
            if row.index as usize != i {
                return Err(FormatError::Invariant(format!(
                    "tile indices not contiguous at row {i} (index {})",
                    row.index
                )));
            }
            if u64::from(row.x) + tile > u64::from(width_px) || u64::from(row.y) + tile > u64::from(height_px) {
                return Err(FormatError::Invariant(format!(
                    "tile {} at ({}, {}) extends past {}x{}",
                    row.index, row.x, row.y, width_px, height_px
                )));
            }
            if !(min_fraction..=1.0).contains(&row.fraction_tissue) {
                return Err(FormatError::Invariant(format!(
                    "tile {} fraction_tissue {} below threshold {min_fraction}",
                    row.index, row.fraction_tissue
                )));
            }
            if let Some(p) = prev {
                if (row.y, row.x) <= (p.1, p.0) {
                    return Err(FormatError::Invariant(format!("tile {} breaks row-major order", row.index)));
                }
            }
            prev = Some((row.x, row.y));
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TILE_MANIFEST_COLUMNS)?;
        let tile_px = self.tile_px.to_string();
        let mpp = self.mpp.to_string();
        for row in &self.rows {
            w.write_record([
                self.slide_id.as_str(),
                &row.index.to_string(),
                &row.x.to_string(),
                &row.y.to_string(),
                &tile_px,
                &mpp,
                &row.fraction_tissue.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| FormatError::Io(e.into_error()))
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        csv_header_check(rdr.headers()?, &TILE_MANIFEST_COLUMNS)?;
        let mut header: Option<(String, u32, f64)> = None;
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let slide_id = record.get(0).unwrap_or("").to_string();
            let index: u32 = parse_field(&record, 1, "tile_index")?;
            let x: u32 = parse_field(&record, 2, "x")?;
            let y: u32 = parse_field(&record, 3, "y")?;
            let tile_px: u32 = parse_field(&record, 4, "tile_px")?;
            let mpp: f64 = parse_field(&record, 5, "mpp")?;
            let fraction_tissue: f64 = parse_field(&record, 6, "fraction_tissue")?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if !(0.0..=1.0).contains(&fraction_tissue) {
                return Err(FormatError::InvalidValue { line, field: "fraction_tissue", value: record[6].to_string() });
            }
            match &header {
                None => header = Some((slide_id, tile_px, mpp)),
                Some((s, t, m)) => {
                    if *s != slide_id || *t != tile_px || *m != mpp {
                        return Err(FormatError::Invariant(format!(
                            "line {line}: slide_id/tile_px/mpp differ from the first row"
                        )));
                    }
                }
            }
            if index as usize != rows.len() {
                return Err(FormatError::InvalidValue { line, field: "tile_index", value: index.to_string() });
            }
            rows.push(TileRow { index, x, y, fraction_tissue });
        }
        let (slide_id, tile_px, mpp) =
            header.ok_or_else(|| FormatError::Malformed("tile manifest has no rows; slide identity unknown".into()))?;
        Ok(TileManifest { slide_id, mpp, tile_px, rows })
    }
}

pub fn write_manifest_csv(manifest: &TileManifest, path: &Path) -> Result<()> {
    write_atomic(path, &manifest.to_csv_bytes()?)?;
    Ok(())
}

pub fn read_manifest_csv(path: &Path) -> Result<TileManifest> {
    TileManifest::from_csv_reader(std::fs::File::open(path)?)
}
