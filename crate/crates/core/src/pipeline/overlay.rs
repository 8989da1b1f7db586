//! Attention heat overlays: tiles at or above a percentile of attention are
//! shaded on the slide thumbnail.

use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::PipelineError;
use crate::formats::{SlideRecord, TileManifest};
use crate::gma::AttentionRow;
use crate::io::write_atomic;
use crate::tiler::{encode_png, load_raster, thumbnail, thumbnail_downscale, thumbnail_tile_rect, TilingConfig};

pub const SHADE_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 · (n−1)`).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Tile indices whose attention is at least the `p`-th percentile.
pub fn shaded_tiles(rows: &[AttentionRow], p: f64) -> Result<BTreeSet<u32>, PipelineError> {
    let values: Vec<f64> = rows.iter().map(|r| r.attention).collect();
    let t = percentile(&values, p)
        .ok_or_else(|| PipelineError::Alignment(format!("no attention rows or bad percentile {p}")))?;
    Ok(rows.iter().filter(|r| r.attention >= t).map(|r| r.tile_index).collect())
}

fn check_alignment(manifest: &TileManifest, rows: &[AttentionRow]) -> Result<(), PipelineError> {
    if let Some(r) = rows.iter().find(|r| r.slide_id != manifest.slide_id) {
        return Err(PipelineError::Alignment(format!("row for {} in export for {}", r.slide_id, manifest.slide_id)));
    }
    let expected: BTreeSet<u32> = manifest.rows.iter().map(|r| r.index).collect();
    let found: BTreeSet<u32> = rows.iter().map(|r| r.tile_index).collect();
    if expected != found || found.len() != rows.len() {
        return Err(PipelineError::Alignment(format!(
            "{}: attention covers {} tile indices ({} rows), manifest has {}",
            manifest.slide_id,
            found.len(),
            rows.len(),
            expected.len()
        )));
    }
    Ok(())
}

/// Renders the overlay on an existing thumbnail with downscale `ds`.
pub fn attention_overlay_image(
    thumb: &RgbImage,
    ds: u32,
    manifest: &TileManifest,
    rows: &[AttentionRow],
    p: f64,
) -> Result<RgbImage, PipelineError> {
    check_alignment(manifest, rows)?;
    let shaded = shaded_tiles(rows, p)?;
    let mut out = thumb.clone();
    let dims = out.dimensions();
    for tile in manifest.rows.iter().filter(|t| shaded.contains(&t.index)) {
        let (x0, y0, x1, y1) = thumbnail_tile_rect(tile.x, tile.y, manifest.tile_px, ds, dims);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let px = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    px[c] = ((u16::from(px[c]) + u16::from(SHADE_COLOR[c])) / 2) as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Loads the slide and writes its attention overlay PNG to `out_path`.
pub fn export_attention_overlay(
    slide: &SlideRecord,
    manifest: &TileManifest,
    rows: &[AttentionRow],
    p: f64,
    out_path: &Path,
) -> Result<(), PipelineError> {
    let img = load_raster(&slide.source_path)?;
    let ds = thumbnail_downscale(img.width(), img.height(), TilingConfig::default().max_thumbnail_side);
    let overlay = attention_overlay_image(&thumbnail(&img, ds), ds, manifest, rows, p)?;
    write_atomic(out_path, &encode_png(&overlay)?)?;
    Ok(())
}
