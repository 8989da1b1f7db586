use super::mask::TissueMask;
use super::{tile_px_for, TilingConfig, TilingError};
use crate::formats::{SlideRecord, TileManifest, TileRow};

/// Fraction of a native-pixel tile covered by tissue, area-weighted over the
/// thumbnail pixels it overlaps.
pub fn tile_fraction(mask: &TissueMask, x: u32, y: u32, tile_px: u32) -> f64 {
    let ds = f64::from(mask.downscale);
    let (ax, bx) = (f64::from(x) / ds, f64::from(x + tile_px) / ds);
    let (ay, by) = (f64::from(y) / ds, f64::from(y + tile_px) / ds);
    let overlap = |lo: f64, hi: f64, p: u32| (hi.min(f64::from(p) + 1.0) - lo.max(f64::from(p))).max(0.0);
    let (px0, px1) = (ax.floor() as u32, (bx.ceil() as u32).min(mask.width));
    let (py0, py1) = (ay.floor() as u32, (by.ceil() as u32).min(mask.height));
    let mut tissue = 0.0;
    for py in py0..py1 {
        let oy = overlap(ay, by, py);
        for px in px0..px1 {
            if mask.is_tissue(px, py) {
                tissue += oy * overlap(ax, bx, px);
            }
        }
    }
    tissue / ((bx - ax) * (by - ay))
}

/// Places a regular grid (origin `(0,0)`, stride `tile_px + stride_gap_px`) and
/// keeps tiles whose tissue fraction reaches the configured threshold.
pub fn tile_slide(slide: &SlideRecord, mask: &TissueMask, cfg: &TilingConfig) -> Result<TileManifest, TilingError> {
    cfg.validate()?;
    if !mask.matches_slide(slide.width_px, slide.height_px) {
        return Err(TilingError::MaskMismatch(slide.slide_id.clone()));
    }
    let area = mask.tissue_area_mm2(slide.mpp);
    if area < cfg.min_tissue_area_mm2 {
        return Err(TilingError::SlideRejected {
            slide_id: slide.slide_id.clone(),
            area_mm2: area,
            min_mm2: cfg.min_tissue_area_mm2,
        });
    }
    let tile_px = tile_px_for(slide.mpp, cfg.field_of_view_um)?;
    let stride = (tile_px + cfg.stride_gap_px) as usize;
    let mut rows = Vec::new();
    let mut y = 0u32;
    while y as u64 + tile_px as u64 <= slide.height_px as u64 {
        let mut x = 0u32;
        while x as u64 + tile_px as u64 <= slide.width_px as u64 {
            let fraction_tissue = tile_fraction(mask, x, y, tile_px);
            if fraction_tissue >= cfg.min_fraction_tissue {
                rows.push(TileRow { index: rows.len() as u32, x, y, fraction_tissue });
            }
            x += stride as u32;
        }
        y += stride as u32;
    }
    Ok(TileManifest { slide_id: slide.slide_id.clone(), mpp: slide.mpp, tile_px, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::PixelClass;

    fn slide(w: u32, h: u32, mpp: f64) -> SlideRecord {
        SlideRecord {
            slide_id: "S".into(),
            patient_id: "P".into(),
            cohort_id: "C".into(),
            mpp,
            width_px: w,
            height_px: h,
            source_path: "unused.png".into(),
            preparation: Default::default(),
            stain: Default::default(),
        }
    }

    fn small_area_cfg() -> TilingConfig {
        TilingConfig { min_tissue_area_mm2: 0.0, ..Default::default() }
    }

    #[test]
    fn full_tissue_1024_grid() {
        let s = slide(1024, 1024, 0.5);
        let mask = TissueMask::from_fn(1024, 1024, 2, |_, _| PixelClass::Tissue);
        let m = tile_slide(&s, &mask, &small_area_cfg()).unwrap();
        assert_eq!(m.tile_px, 256);
        let coords: Vec<_> = m.rows.iter().map(|r| (r.x, r.y)).collect();
        let expected: Vec<_> = [0, 257, 514].iter().flat_map(|&y| [0, 257, 514].map(move |x| (x, y))).collect();
        assert_eq!(coords, expected);
        assert!(m.rows.iter().all(|r| r.fraction_tissue == 1.0));
        m.validate(1024, 1024, 0.5).unwrap();
    }

    #[test]
    fn all_background_is_rejected() {
        let s = slide(1024, 1024, 0.5);
        let mask = TissueMask::from_fn(1024, 1024, 2, |_, _| PixelClass::Background);
        let err = tile_slide(&s, &mask, &TilingConfig::default()).unwrap_err();
        assert!(matches!(err, TilingError::SlideRejected { area_mm2, .. } if area_mm2 == 0.0));
    }

    #[test]
    fn left_half_tissue_keeps_majority_columns() {
        // Tissue for native x < 512 (thumbnail x < 256).
        let s = slide(1024, 1024, 0.5);
        let mask =
            TissueMask::from_fn(
                1024,
                1024,
                2,
                |x, _| {
                    if x < 256 {
                        PixelClass::Tissue
                    } else {
                        PixelClass::Background
                    }
                },
            );
        let m = tile_slide(&s, &mask, &small_area_cfg()).unwrap();
        // Column x=0: fraction 1; x=257: covers [257,513) -> 255/256; x=514: 0.
        assert_eq!(m.len(), 6);
        for r in &m.rows {
            let expected = match r.x {
                0 => 1.0,
                257 => 255.0 / 256.0,
                _ => panic!("unexpected column {}", r.x),
            };
            assert_eq!(r.fraction_tissue, expected);
        }
    }

    #[test]
    fn artifact_pixels_are_not_tissue() {
        let s = slide(1024, 1024, 0.5);
        let mask = TissueMask::from_fn(1024, 1024, 2, |_, _| PixelClass::Artifact);
        assert!(tile_slide(&s, &mask, &small_area_cfg()).unwrap().is_empty());
    }

    #[test]
    fn mask_of_wrong_size_is_rejected() {
        let s = slide(1024, 1024, 0.5);
        let mask = TissueMask::from_fn(512, 512, 2, |_, _| PixelClass::Tissue);
        assert!(matches!(tile_slide(&s, &mask, &small_area_cfg()), Err(TilingError::MaskMismatch(_))));
    }
}
