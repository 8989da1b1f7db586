use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, Rgb, RgbImage};

use super::raster::{load_raster, thumbnail, thumbnail_downscale};
use super::{TilingConfig, TilingError};
use crate::formats::{SlideRecord, TileManifest};
use crate::io::write_atomic;

pub const OVERLAY_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Inclusive thumbnail rectangle `(x0, y0, x1, y1)` covered by a native tile.
pub fn thumbnail_tile_rect(x: u32, y: u32, tile_px: u32, ds: u32, thumb: (u32, u32)) -> (u32, u32, u32, u32) {
    let x1 = ((x + tile_px - 1) / ds).min(thumb.0 - 1);
    let y1 = ((y + tile_px - 1) / ds).min(thumb.1 - 1);
    (x / ds, y / ds, x1, y1)
}

/// Draws one-pixel tile outlines onto a copy of `thumb`.
pub fn render_overlay_image(thumb: &RgbImage, ds: u32, manifest: &TileManifest) -> RgbImage {
    let mut out = thumb.clone();
    let dims = out.dimensions();
    for row in &manifest.rows {
        let (x0, y0, x1, y1) = thumbnail_tile_rect(row.x, row.y, manifest.tile_px, ds, dims);
        for x in x0..=x1 {
            out.put_pixel(x, y0, OVERLAY_COLOR);
            out.put_pixel(x, y1, OVERLAY_COLOR);
        }
        for y in y0..=y1 {
            out.put_pixel(x0, y, OVERLAY_COLOR);
            out.put_pixel(x1, y, OVERLAY_COLOR);
        }
    }
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, TilingError> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| TilingError::Raster { path: "<png>".into(), reason: e.to_string() })?;
    Ok(buf)
}

/// Loads the slide, builds the QC thumbnail and writes it as PNG with the
/// manifest's tiles outlined.
pub fn render_overlay(slide: &SlideRecord, manifest: &TileManifest, out_path: &Path) -> Result<(), TilingError> {
    if manifest.slide_id != slide.slide_id {
        return Err(TilingError::MaskMismatch(slide.slide_id.clone()));
    }
    let img = load_raster(&slide.source_path)?;
    let ds = thumbnail_downscale(img.width(), img.height(), TilingConfig::default().max_thumbnail_side);
    let overlay = render_overlay_image(&thumbnail(&img, ds), ds, manifest);
    write_atomic(out_path, &encode_png(&overlay)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::TileRow;

    fn nine_tiles() -> TileManifest {
        let mut rows = Vec::new();
        for y in [0, 257, 514] {
            for x in [0, 257, 514] {
                rows.push(TileRow { index: rows.len() as u32, x, y, fraction_tissue: 1.0 });
            }
        }
        TileManifest { slide_id: "S".into(), mpp: 0.5, tile_px: 256, rows }
    }

    #[test]
    fn every_tile_has_green_corners() {
        let thumb = RgbImage::from_pixel(512, 512, Rgb([200, 120, 180]));
        let m = nine_tiles();
        let out = render_overlay_image(&thumb, 2, &m);
        let outlined = m
            .rows
            .iter()
            .filter(|r| {
                let (x0, y0, x1, y1) = thumbnail_tile_rect(r.x, r.y, 256, 2, (512, 512));
                [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].iter().all(|&(x, y)| *out.get_pixel(x, y) == OVERLAY_COLOR)
            })
            .count();
        assert_eq!(outlined, 9);
    }

    #[test]
    fn empty_manifest_leaves_thumbnail_untouched() {
        let thumb = RgbImage::from_pixel(64, 64, Rgb([1, 2, 3]));
        let m = TileManifest { rows: vec![], ..nine_tiles() };
        assert_eq!(render_overlay_image(&thumb, 2, &m), thumb);
    }
}
