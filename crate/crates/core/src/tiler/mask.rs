use image::RgbImage;

use super::otsu::otsu_threshold;
use super::raster::{gaussian_blur, load_raster, luminance, rgb_to_hsv, thumbnail, thumbnail_downscale};
use super::{TilingConfig, TilingError};
use crate::formats::SlideRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelClass {
    Background,
    Tissue,
    /// Pen or marker ink; never counted as tissue.
    Artifact,
}

/// Per-pixel classification at thumbnail resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    /// Native pixels per thumbnail pixel (a power of two, at least 2).
    pub downscale: u32,
    classes: Vec<PixelClass>,
}

impl TissueMask {
    /// Builds a mask for a slide of `slide_w × slide_h` native pixels, classifying
    /// each thumbnail pixel with `f(x, y)`.
    pub fn from_fn(slide_w: u32, slide_h: u32, downscale: u32, mut f: impl FnMut(u32, u32) -> PixelClass) -> Self {
        assert!(downscale >= 2, "thumbnail downscale must exceed 1");
        let (width, height) = (slide_w.div_ceil(downscale), slide_h.div_ceil(downscale));
        let mut classes = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                classes.push(f(x, y));
            }
        }
        TissueMask { width, height, downscale, classes }
    }

    pub fn get(&self, x: u32, y: u32) -> PixelClass {
        self.classes[(y * self.width + x) as usize]
    }

    pub fn is_tissue(&self, x: u32, y: u32) -> bool {
        self.get(x, y) == PixelClass::Tissue
    }

    pub fn count(&self, class: PixelClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Tissue area using the thumbnail pixel footprint `(mpp · downscale)²`.
    pub fn tissue_area_mm2(&self, mpp: f64) -> f64 {
        let side_mm = mpp * f64::from(self.downscale) / 1000.0;
        self.count(PixelClass::Tissue) as f64 * side_mm * side_mm
    }

    pub fn matches_slide(&self, slide_w: u32, slide_h: u32) -> bool {
        self.width == slide_w.div_ceil(self.downscale) && self.height == slide_h.div_ceil(self.downscale)
    }
}

pub fn detect_tissue(slide: &SlideRecord, cfg: &TilingConfig) -> Result<TissueMask, TilingError> {
    let img = load_raster(&slide.source_path)?;
    if img.dimensions() != (slide.width_px, slide.height_px) {
        return Err(TilingError::MaskMismatch(slide.slide_id.clone()));
    }
    detect_tissue_image(&img, cfg)
}

/// Tissue detection on an in-memory raster.
///
/// Steps on the thumbnail: grayscale, Gaussian blur, Otsu (the darker class
/// is tissue), then windows with near-constant grayscale become background
/// and pixels inside any pen-hue rule become artifacts.
pub fn detect_tissue_image(img: &RgbImage, cfg: &TilingConfig) -> Result<TissueMask, TilingError> {
    cfg.validate()?;
    let (w, h) = img.dimensions();
    let ds = thumbnail_downscale(w, h, cfg.max_thumbnail_side);
    let thumb = thumbnail(img, ds);
    let (tw, th) = thumb.dimensions();
    if tw < 16 || th < 16 {
        return Err(TilingError::ThumbnailTooSmall { width: tw, height: th });
    }
    let (tw_us, th_us) = (tw as usize, th as usize);

    let gray: Vec<f64> = thumb.pixels().map(|p| luminance(*p)).collect();
    let blurred = gaussian_blur(&gray, tw_us, th_us, cfg.gaussian_sigma_px);
    let quantized: Vec<u8> = blurred.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let mut hist = [0u64; 256];
    for &q in &quantized {
        hist[q as usize] += 1;
    }
    let threshold = match otsu_threshold(&hist) {
        Ok(t) => Some(t),
        Err(TilingError::DegenerateHistogram) => None,
        Err(e) => return Err(e),
    };
    let mut classes: Vec<PixelClass> = quantized
        .iter()
        .map(|&q| match threshold {
            Some(t) if q <= t => PixelClass::Tissue,
            _ => PixelClass::Background,
        })
        .collect();

    let win = cfg.low_variance_window as usize;
    let std_limit = cfg.low_variance_std * 255.0;
    for by in (0..th_us).step_by(win) {
        for bx in (0..tw_us).step_by(win) {
            let (y1, x1) = ((by + win).min(th_us), (bx + win).min(tw_us));
            let n = ((y1 - by) * (x1 - bx)) as f64;
            let (mut s, mut ss) = (0.0, 0.0);
            for y in by..y1 {
                for x in bx..x1 {
                    let g = gray[y * tw_us + x];
                    s += g;
                    ss += g * g;
                }
            }
            let mean = s / n;
            let std = (ss / n - mean * mean).max(0.0).sqrt();
            if std < std_limit {
                for y in by..y1 {
                    for x in bx..x1 {
                        classes[y * tw_us + x] = PixelClass::Background;
                    }
                }
            }
        }
    }

    if !cfg.pen_rules.is_empty() {
        for (i, p) in thumb.pixels().enumerate() {
            let hsv = rgb_to_hsv(*p);
            if cfg.pen_rules.iter().any(|r| r.matches(hsv)) {
                classes[i] = PixelClass::Artifact;
            }
        }
    }

    Ok(TissueMask { width: tw, height: th, downscale: ds, classes })
}
