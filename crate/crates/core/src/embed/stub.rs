use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{provenance_timestamp, EmbedError, EncoderKind, EncoderSpec};
use crate::formats::{EmbeddingArtifact, EmbeddingHeader, SlideRecord, TileManifest};
use crate::tiler::load_raster;

/// Side of the grayscale patch each tile is reduced to before projection.
pub const PATCH_SIDE: usize = 16;

fn projection(spec: &EncoderSpec, seed: u64) -> Vec<f64> {
    let key = format!("{}\0{seed}", spec.encoder_id);
    let digest = crate::io::sha256_hex(key.as_bytes());
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(&digest, &mut bytes).expect("sha256 hex");
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let scale = 1.0 / PATCH_SIDE as f64;
    (0..spec.dim * PATCH_SIDE * PATCH_SIDE)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

fn cell_bounds(i: usize, tile: u32) -> (u32, u32) {
    let lo = (i as u64 * u64::from(tile) / PATCH_SIDE as u64) as u32;
    let hi = ((i as u64 + 1) * u64::from(tile) / PATCH_SIDE as u64) as u32;
    (lo, hi.max(lo + 1).min(tile))
}

fn grayscale_patch(img: &RgbImage, x: u32, y: u32, tile: u32) -> [f64; PATCH_SIDE * PATCH_SIDE] {
    let mut patch = [0f64; PATCH_SIDE * PATCH_SIDE];
    for cy in 0..PATCH_SIDE {
        let (y0, y1) = cell_bounds(cy, tile);
        for cx in 0..PATCH_SIDE {
            let (x0, x1) = cell_bounds(cx, tile);
            let mut sum = 0f64;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    sum += crate::tiler::raster_luminance(*img.get_pixel(x + xx, y + yy));
                }
            }
            patch[cy * PATCH_SIDE + cx] = sum / f64::from((x1 - x0) * (y1 - y0)) / 255.0;
        }
    }
    patch
}

/// Deterministic stand-in for a foundation-model encoder: each tile is reduced
/// to a 16×16 grayscale patch and projected by a fixed Gaussian matrix seeded
/// from `(encoder_id, seed)`. Row `i` encodes manifest row `i`.
pub fn stub_encode(
    slide: &SlideRecord,
    manifest: &TileManifest,
    spec: &EncoderSpec,
    seed: u64,
) -> Result<EmbeddingArtifact, EmbedError> {
    if manifest.slide_id != slide.slide_id {
        return Err(EmbedError::Mismatch(format!(
            "manifest is for {}, slide is {}",
            manifest.slide_id, slide.slide_id
        )));
    }
    let img = load_raster(&slide.source_path)?;
    if img.dimensions() != (slide.width_px, slide.height_px) {
        return Err(EmbedError::Mismatch(format!(
            "raster is {:?}, slide record says {}x{}",
            img.dimensions(),
            slide.width_px,
            slide.height_px
        )));
    }
    stub_encode_image(&img, manifest, spec, seed)
}

pub fn stub_encode_image(
    img: &RgbImage,
    manifest: &TileManifest,
    spec: &EncoderSpec,
    seed: u64,
) -> Result<EmbeddingArtifact, EmbedError> {
    if spec.kind != EncoderKind::Stub {
        return Err(EmbedError::WrongKind(spec.encoder_id.clone(), "stub"));
    }
    let (w, h) = img.dimensions();
    let tile = manifest.tile_px;
    let proj = projection(spec, seed);
    let k = PATCH_SIDE * PATCH_SIDE;
    let mut data = Vec::with_capacity(manifest.len() * spec.dim);
    for row in &manifest.rows {
        if u64::from(row.x) + u64::from(tile) > u64::from(w) || u64::from(row.y) + u64::from(tile) > u64::from(h) {
            return Err(EmbedError::Mismatch(format!(
                "tile {} at ({}, {}) exceeds raster {w}x{h}",
                row.index, row.x, row.y
            )));
        }
        let patch = grayscale_patch(img, row.x, row.y, tile);
        for d in 0..spec.dim {
            let weights = &proj[d * k..(d + 1) * k];
            let v: f64 = weights.iter().zip(&patch).map(|(a, b)| a * b).sum();
            data.push(v as f32);
        }
    }
    let header = EmbeddingHeader {
        slide_id: manifest.slide_id.clone(),
        encoder_id: spec.encoder_id.clone(),
        encoder_version: spec.encoder_version.clone(),
        n_tiles: manifest.len() as u64,
        dim: spec.dim as u32,
        extraction_timestamp: provenance_timestamp(|| 0),
    };
    Ok(EmbeddingArtifact::new(header, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::TileRow;
    use image::Rgb;

    fn manifest(coords: &[(u32, u32)]) -> TileManifest {
        TileManifest {
            slide_id: "S".into(),
            mpp: 2.0,
            tile_px: 64,
            rows: coords
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| TileRow { index: i as u32, x, y, fraction_tissue: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn identical_tiles_give_identical_rows() {
        let img = RgbImage::from_fn(200, 80, |x, y| Rgb([((x % 65) * 3) as u8, (y * 2) as u8, 90]));
        let m = manifest(&[(0, 0), (65, 0), (130, 0)]);
        let a = stub_encode_image(&img, &m, &EncoderSpec::stub("stub-v1", 12), 7).unwrap();
        assert_eq!(a.row(0), a.row(1));
        assert_eq!(a.row(1), a.row(2));
    }

    #[test]
    fn different_seeds_give_different_projections() {
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, 0]));
        let m = manifest(&[(0, 0)]);
        let spec = EncoderSpec::stub("stub-v1", 8);
        let a = stub_encode_image(&img, &m, &spec, 0).unwrap();
        let b = stub_encode_image(&img, &m, &spec, 1).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn out_of_bounds_tile_is_a_mismatch() {
        let img = RgbImage::new(100, 100);
        let m = manifest(&[(50, 0)]);
        assert!(matches!(
            stub_encode_image(&img, &m, &EncoderSpec::stub("stub-v1", 4), 0),
            Err(EmbedError::Mismatch(_))
        ));
    }

    #[test]
    fn ingested_spec_cannot_stub_encode() {
        let img = RgbImage::new(64, 64);
        let m = manifest(&[(0, 0)]);
        assert!(stub_encode_image(&img, &m, &EncoderSpec::ingested("uni", 4), 0).is_err());
    }

    #[test]
    fn small_tiles_still_fill_every_cell() {
        assert_eq!(cell_bounds(0, 8), (0, 1));
        assert_eq!(cell_bounds(15, 8), (7, 8));
        assert_eq!(cell_bounds(15, 256), (240, 256));
    }
}
