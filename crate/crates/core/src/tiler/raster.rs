use std::path::Path;

use image::{Rgb, RgbImage};

use super::TilingError;

pub fn load_raster(path: &Path) -> Result<RgbImage, TilingError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| TilingError::Raster { path: path.display().to_string(), reason: e.to_string() })
}

/// Smallest power of two (at least 2) that brings the longest side to
/// `max_side` or below.
pub fn thumbnail_downscale(width: u32, height: u32, max_side: u32) -> u32 {
    let longest = width.max(height);
    let mut ds = 2u32;
    while longest.div_ceil(ds) > max_side {
        ds *= 2;
    }
    ds
}

/// Box-filtered thumbnail; each output pixel averages the native block it
/// covers (partial blocks at the right/bottom edges included).
pub fn thumbnail(img: &RgbImage, ds: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (tw, th) = (w.div_ceil(ds), h.div_ceil(ds));
    let mut out = RgbImage::new(tw, th);
    for ty in 0..th {
        let y0 = ty * ds;
        let y1 = (y0 + ds).min(h);
        for tx in 0..tw {
            let x0 = tx * ds;
            let x1 = (x0 + ds).min(w);
            let mut sum = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x, y).0;
                    for c in 0..3 {
                        sum[c] += u64::from(p[c]);
                    }
                }
            }
            let n = u64::from((x1 - x0) * (y1 - y0));
            let px = sum.map(|s| ((s + n / 2) / n) as u8);
            out.put_pixel(tx, ty, Rgb(px));
        }
    }
    out
}

pub(crate) fn luminance(p: Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

/// (hue in degrees, saturation, value) with s, v in [0, 1].
pub(crate) fn rgb_to_hsv(p: Rgb<u8>) -> (f64, f64, f64) {
    let [r, g, b] = p.0.map(|c| f64::from(c) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

/// Separable Gaussian blur with edge clamping; kernel radius `ceil(3σ)`.
pub(crate) fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * src[y * w + clamp(x as isize + i as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp(y as isize + i as isize - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_is_power_of_two_at_least_two() {
        assert_eq!(thumbnail_downscale(1024, 1024, 2048), 2);
        assert_eq!(thumbnail_downscale(4096, 100, 2048), 2);
        assert_eq!(thumbnail_downscale(4097, 100, 2048), 4);
        assert_eq!(thumbnail_downscale(100_000, 80_000, 2048), 64);
    }

    #[test]
    fn thumbnail_dims_round_up() {
        let img = RgbImage::new(9, 4);
        let t = thumbnail(&img, 2);
        assert_eq!(t.dimensions(), (5, 2));
    }

    #[test]
    fn blur_preserves_constant_field() {
        let src = vec![100.0; 30 * 20];
        let out = gaussian_blur(&src, 30, 20, 2.0);
        assert!(out.iter().all(|v| (v - 100.0).abs() < 1e-9));
    }

    #[test]
    fn hsv_of_primaries() {
        assert_eq!(rgb_to_hsv(Rgb([0, 0, 255])), (240.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv(Rgb([0, 255, 0])), (120.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv(Rgb([255, 255, 255])).1, 0.0);
    }
}
