use std::path::Path;

use goldmark_core::formats::{SlideRecord, TileManifest};
use goldmark_core::tiler::{
    detect_tissue, encode_png, otsu_threshold, tile_px_for, tile_slide, PixelClass, TilingConfig, TissueMask,
};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive Otsu via within-class variance: minimise
/// `Q − s0²/n0 − s1²/n1`, i.e. maximise `(s0²·n1 + s1²·n0) / (n0·n1)`.
/// Exact rational comparison; ties keep the lowest threshold.
fn otsu_oracle(hist: &[u64; 256]) -> Option<u8> {
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..255usize {
        let n0: u128 = hist[..=t].iter().map(|&c| c as u128).sum();
        let n1: u128 = hist[t + 1..].iter().map(|&c| c as u128).sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u128 = (0..=t).map(|i| hist[i] as u128 * i as u128).sum();
        let s1: u128 = (t + 1..256).map(|i| hist[i] as u128 * i as u128).sum();
        let (num, den) = (s0 * s0 * n1 + s1 * s1 * n0, n0 * n1);
        match best {
            Some((_, bn, bd)) if num * bd <= bn * den => {}
            _ => best = Some((t as u8, num, den)),
        }
    }
    best.map(|(t, _, _)| t)
}

fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.random_range(0..4) {
        0 => {
            for c in h.iter_mut() {
                *c = rng.random_range(0..1000);
            }
        }
        1 => {
            let k = rng.random_range(2..8);
            for _ in 0..k {
                h[rng.random_range(0..256)] += rng.random_range(1..1000);
            }
        }
        2 => {
            // Symmetric shapes produce exact ties between thresholds.
            let k = rng.random_range(1..6);
            for _ in 0..k {
                let (i, c) = (rng.random_range(0..128), rng.random_range(1..500));
                h[i] += c;
                h[255 - i] += c;
            }
        }
        _ => {
            let (m0, m1) = (rng.random_range(20.0..120.0), rng.random_range(130.0..240.0));
            for _ in 0..rng.random_range(200..3000) {
                let m: f64 = if rng.random_bool(0.4) { m0 } else { m1 };
                let v = (m + rng.random_range(-25.0..25.0)).clamp(0.0, 255.0);
                h[v as usize] += 1;
            }
        }
    }
    h
}

#[test]
fn otsu_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    while checked < 1000 {
        let h = random_histogram(&mut rng);
        match otsu_oracle(&h) {
            Some(expected) => {
                assert_eq!(otsu_threshold(&h).unwrap(), expected, "{h:?}");
                checked += 1;
            }
            None => assert!(otsu_threshold(&h).is_err()),
        }
    }
}

#[test]
fn tile_edge_tracks_resolution() {
    assert_eq!(tile_px_for(0.5, 128.0).unwrap(), 256);
    assert_eq!(tile_px_for(0.25, 128.0).unwrap(), 512);
    for (mpp, px) in [(1.0, 128), (2.0, 64), (0.3, 427), (0.2527, 507)] {
        assert_eq!(tile_px_for(mpp, 128.0).unwrap(), px, "mpp {mpp}");
    }
    assert!(tile_px_for(0.0, 128.0).is_err());
    assert!(tile_px_for(f64::NAN, 128.0).is_err());
}

fn slide(id: &str, w: u32, h: u32, mpp: f64, path: &Path) -> SlideRecord {
    SlideRecord {
        slide_id: id.into(),
        patient_id: format!("P-{id}"),
        cohort_id: "FIX".into(),
        mpp,
        width_px: w,
        height_px: h,
        source_path: path.to_path_buf(),
        preparation: Default::default(),
        stain: Default::default(),
    }
}

/// Textured tissue in the top-left `tissue × tissue` square, white elsewhere.
fn write_fixture(path: &Path, side: u32, tissue: u32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = RgbImage::from_fn(side, side, |x, y| {
        if x < tissue && y < tissue {
            let n: i16 = rng.random_range(-30..=30);
            Rgb([(180 + n) as u8, (110 + n) as u8, (190 + n) as u8])
        } else {
            Rgb([242, 242, 244])
        }
    });
    std::fs::write(path, encode_png(&img).unwrap()).unwrap();
}

fn small_cfg() -> TilingConfig {
    TilingConfig { min_tissue_area_mm2: 0.01, ..TilingConfig::default() }
}

#[test]
fn fixture_1024_at_half_micron_gives_nine_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("fixture.png");
    write_fixture(&png, 1024, 780, 3);
    let s = slide("FIX-1", 1024, 1024, 0.5, &png);
    let cfg = small_cfg();
    let run = || {
        let mask = detect_tissue(&s, &cfg).unwrap();
        tile_slide(&s, &mask, &cfg).unwrap()
    };
    let m = run();
    assert_eq!(m.tile_px, 256);
    let coords: Vec<(u32, u32)> = m.rows.iter().map(|r| (r.x, r.y)).collect();
    let expected: Vec<(u32, u32)> =
        [0u32, 257, 514].iter().flat_map(|&y| [0u32, 257, 514].map(move |x| (x, y))).collect();
    assert_eq!(coords, expected);
    assert_eq!(m.to_csv_bytes().unwrap(), run().to_csv_bytes().unwrap());
}

fn assert_geometry(m: &TileManifest, w: u32, h: u32, cfg: &TilingConfig) {
    let t = m.tile_px;
    for (i, r) in m.rows.iter().enumerate() {
        assert_eq!(r.index as usize, i);
        assert!(r.x + t <= w && r.y + t <= h, "tile {i} at ({}, {}) leaves {w}x{h}", r.x, r.y);
        assert_eq!(r.x % (t + 1), 0);
        assert_eq!(r.y % (t + 1), 0);
        assert!(r.fraction_tissue >= cfg.min_fraction_tissue && r.fraction_tissue <= 1.0);
    }
    for (i, a) in m.rows.iter().enumerate() {
        for b in &m.rows[i + 1..] {
            let disjoint = a.x + t <= b.x || b.x + t <= a.x || a.y + t <= b.y || b.y + t <= a.y;
            assert!(disjoint, "tiles {} and {} overlap", a.index, b.index);
        }
    }
}

#[test]
fn random_slides_tile_in_bounds_without_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = TilingConfig { min_tissue_area_mm2: 0.0, ..TilingConfig::default() };
    for k in 0..100 {
        let mpp = [0.25, 0.5, 1.0, 2.0, 0.37][rng.random_range(0..5)];
        let (w, h): (u32, u32) = (rng.random_range(300..6000), rng.random_range(300..6000));
        let ds = [2, 4, 8, 16][rng.random_range(0..4)];
        let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..5))
            .map(|_| {
                let (tw, th) = (f64::from(w.div_ceil(ds)), f64::from(h.div_ceil(ds)));
                (rng.random_range(0.0..tw), rng.random_range(0.0..th), rng.random_range(5.0..tw.max(th) / 2.0 + 6.0))
            })
            .collect();
        let mask = TissueMask::from_fn(w, h, ds, |x, y| {
            let inside = blobs.iter().any(|&(cx, cy, r)| (f64::from(x) - cx).hypot(f64::from(y) - cy) < r);
            if inside {
                PixelClass::Tissue
            } else {
                PixelClass::Background
            }
        });
        let s = slide(&format!("R{k}"), w, h, mpp, Path::new("unused.png"));
        let m = tile_slide(&s, &mask, &cfg).unwrap();
        assert_geometry(&m, w, h, &cfg);
        m.validate(w, h, cfg.min_fraction_tissue).unwrap();
        assert_eq!(tile_slide(&s, &mask, &cfg).unwrap(), m);
    }
}
