//! Tissue detection and resolution-aware tile grids.
//!
//! Tile size is set by a fixed physical field of view, so a 128 µm tile is
//! 256 px at 0.5 µm/px and 512 px at 0.25 µm/px. Tissue is found on a
//! power-of-two thumbnail (grayscale, Gaussian blur, Otsu), then cleaned of
//! flat background windows and pen marks.

mod grid;
mod mask;
mod otsu;
mod overlay;
mod raster;

use serde::{Deserialize, Serialize};

pub use grid::{tile_fraction, tile_slide};
pub use mask::{detect_tissue, detect_tissue_image, PixelClass, TissueMask};
pub use otsu::{between_class_score, otsu_threshold};
pub use overlay::{encode_png, render_overlay, render_overlay_image, thumbnail_tile_rect, OVERLAY_COLOR};
pub(crate) use raster::luminance as raster_luminance;
pub use raster::{load_raster, thumbnail, thumbnail_downscale};

use crate::formats::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum TilingError {
    #[error("invalid resolution: {0} µm/px")]
    InvalidResolution(f64),
    #[error("degenerate histogram: fewer than two occupied intensity bins")]
    DegenerateHistogram,
    #[error("cannot read raster {path}: {reason}")]
    Raster { path: String, reason: String },
    #[error("thumbnail {width}x{height} is smaller than 16x16")]
    ThumbnailTooSmall { width: u32, height: u32 },
    #[error("slide {slide_id} rejected: {area_mm2:.3} mm² tissue < {min_mm2} mm²")]
    SlideRejected { slide_id: String, area_mm2: f64, min_mm2: f64 },
    #[error("tissue mask does not match slide {0}")]
    MaskMismatch(String),
    #[error("invalid tiling config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// HSV window classifying a pixel as pen/marker ink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenRule {
    pub name: String,
    /// Degrees, inclusive. `hue_min > hue_max` wraps through 0.
    pub hue_min: f64,
    pub hue_max: f64,
    pub sat_min: f64,
    #[serde(default)]
    pub val_min: f64,
    #[serde(default = "one")]
    pub val_max: f64,
}

fn one() -> f64 {
    1.0
}

impl PenRule {
    /// `hsv` = (hue degrees, saturation, value), each of s and v in [0, 1].
    pub fn matches(&self, (h, s, v): (f64, f64, f64)) -> bool {
        let hue_ok = if self.hue_min <= self.hue_max {
            (self.hue_min..=self.hue_max).contains(&h)
        } else {
            h >= self.hue_min || h <= self.hue_max
        };
        hue_ok && s > self.sat_min && (self.val_min..=self.val_max).contains(&v)
    }

    pub fn default_rules() -> Vec<PenRule> {
        vec![
            PenRule { name: "blue".into(), hue_min: 180.0, hue_max: 260.0, sat_min: 0.5, val_min: 0.15, val_max: 1.0 },
            PenRule { name: "green".into(), hue_min: 75.0, hue_max: 165.0, sat_min: 0.5, val_min: 0.15, val_max: 1.0 },
            PenRule { name: "black".into(), hue_min: 0.0, hue_max: 360.0, sat_min: -1.0, val_min: 0.0, val_max: 0.12 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub field_of_view_um: f64,
    pub stride_gap_px: u32,
    pub min_fraction_tissue: f64,
    /// Gaussian sigma in thumbnail pixels.
    pub gaussian_sigma_px: f64,
    pub min_tissue_area_mm2: f64,
    /// Side of the square windows used for flat-background suppression.
    pub low_variance_window: u32,
    /// Grayscale standard deviation (0..1 scale) below which a window is background.
    pub low_variance_std: f64,
    pub max_thumbnail_side: u32,
    pub pen_rules: Vec<PenRule>,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            field_of_view_um: 128.0,
            stride_gap_px: 1,
            min_fraction_tissue: 0.5,
            gaussian_sigma_px: 2.0,
            min_tissue_area_mm2: 25.0,
            low_variance_window: 8,
            low_variance_std: 4.0 / 255.0,
            max_thumbnail_side: 2048,
            pen_rules: PenRule::default_rules(),
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<(), TilingError> {
        if !(self.field_of_view_um.is_finite() && self.field_of_view_um > 0.0) {
            return Err(TilingError::Config("field_of_view_um must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_fraction_tissue) {
            return Err(TilingError::Config("min_fraction_tissue must be in [0, 1]".into()));
        }
        if self.low_variance_window == 0 || self.max_thumbnail_side < 16 {
            return Err(TilingError::Config("window and thumbnail size must be positive".into()));
        }
        Ok(())
    }
}

/// Tile width in native pixels for a fixed physical field of view:
/// `round(fov_um / mpp)`, halves rounded away from zero.
pub fn tile_px_for(mpp: f64, fov_um: f64) -> Result<u32, TilingError> {
    if !(mpp.is_finite() && mpp > 0.0) {
        return Err(TilingError::InvalidResolution(mpp));
    }
    let px = (fov_um / mpp).round();
    if !(px >= 1.0 && px <= f64::from(u32::MAX)) {
        return Err(TilingError::Config(format!("tile size {px} px out of range")));
    }
    Ok(px as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_size_examples() {
        assert_eq!(tile_px_for(0.50, 128.0).unwrap(), 256);
        assert_eq!(tile_px_for(0.25, 128.0).unwrap(), 512);
        assert_eq!(tile_px_for(1.00, 128.0).unwrap(), 128);
    }

    #[test]
    fn tile_size_rounds_half_away_from_zero() {
        // 128 / 0.512 = 250 exactly; 2.5 / 1.0 = 2.5 rounds to 3.
        assert_eq!(tile_px_for(0.512, 128.0).unwrap(), 250);
        assert_eq!(tile_px_for(1.0, 2.5).unwrap(), 3);
    }

    #[test]
    fn non_positive_resolution_is_rejected() {
        for mpp in [0.0, -0.25, f64::NAN] {
            assert!(matches!(tile_px_for(mpp, 128.0), Err(TilingError::InvalidResolution(_))));
        }
    }

    #[test]
    fn hue_window_wraps() {
        let red =
            PenRule { name: "red".into(), hue_min: 340.0, hue_max: 20.0, sat_min: 0.5, val_min: 0.0, val_max: 1.0 };
        assert!(red.matches((355.0, 0.9, 0.8)));
        assert!(red.matches((10.0, 0.9, 0.8)));
        assert!(!red.matches((180.0, 0.9, 0.8)));
        assert!(!red.matches((10.0, 0.3, 0.8)));
    }
}
