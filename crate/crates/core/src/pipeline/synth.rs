//! Small synthetic cohort for smoke runs: textured tissue blobs on a bright
//! background, with denser dark nuclei on positive slides.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::formats::{write_labels_csv, EvidenceLevel, LabelManifest, LabelRow, Preparation, ResolutionSidecar, Stain};
use crate::io::write_atomic;
use crate::tiler::encode_png;

pub const SYNTH_TASK: &str = "SYN:GENE1";
pub const SYNTH_COHORT: &str = "SYN";

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub n_slides: usize,
    pub side_px: u32,
    pub mpp: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { n_slides: 6, side_px: 448, mpp: 2.0, seed: 7 }
    }
}

fn render(side: u32, positive: bool, rng: &mut ChaCha8Rng) -> RgbImage {
    let c = f64::from(side) / 2.0;
    let (rx, ry) = (c * rng.random_range(0.62..0.75), c * rng.random_range(0.62..0.75));
    let mut img = RgbImage::from_fn(side, side, |_, _| {
        let n = rng.random_range(-3i16..=3);
        let v = (240 + n) as u8;
        Rgb([v, v, v.saturating_add(2)])
    });
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = ((f64::from(x) - c) / rx, (f64::from(y) - c) / ry);
            if dx * dx + dy * dy > 1.0 {
                continue;
            }
            let n: i16 = rng.random_range(-28..=28);
            let px = |base: i16| (base + n).clamp(0, 255) as u8;
            img.put_pixel(x, y, Rgb([px(186), px(122), px(196)]));
        }
    }
    let nuclei = if positive { 900 } else { 220 };
    for _ in 0..nuclei {
        let (x, y) = (rng.random_range(0..side), rng.random_range(0..side));
        let (dx, dy) = ((f64::from(x) - c) / rx, (f64::from(y) - c) / ry);
        if dx * dx + dy * dy > 0.9 {
            continue;
        }
        for yy in y.saturating_sub(2)..(y + 3).min(side) {
            for xx in x.saturating_sub(2)..(x + 3).min(side) {
                img.put_pixel(xx, yy, Rgb([84, 44, 120]));
            }
        }
    }
    img
}

/// Writes `slides/`, `labels.csv` and `goldmark.toml` under `dir`. Returns the
/// config path.
pub fn generate_synthetic_cohort(dir: &Path, opts: &SynthOptions) -> Result<PathBuf, PipelineError> {
    if opts.n_slides < 4 {
        return Err(PipelineError::Config("synthetic cohort needs at least 4 slides".into()));
    }
    let slides = dir.join("slides");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut labels = Vec::new();
    for i in 0..opts.n_slides {
        let slide_id = format!("SYN-{:03}", i + 1);
        let patient_id = format!("P{:03}", i + 1);
        let positive = i % 2 == 0;
        let img = render(opts.side_px, positive, &mut rng);
        write_atomic(&slides.join(format!("{slide_id}.png")), &encode_png(&img)?)?;
        let sidecar = ResolutionSidecar {
            slide_id: slide_id.clone(),
            patient_id: patient_id.clone(),
            cohort_id: SYNTH_COHORT.into(),
            mpp: opts.mpp,
            image: None,
            preparation: Preparation::Ffpe,
            stain: Stain::He,
        };
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        write_atomic(&slides.join(format!("{slide_id}.res.json")), &json)?;
        labels.push(LabelRow {
            patient_id,
            slide_id,
            task_id: SYNTH_TASK.into(),
            label: u8::from(positive),
            evidence_level: EvidenceLevel::L1,
        });
    }
    write_labels_csv(&LabelManifest::new(labels)?, &dir.join("labels.csv"))?;
    let n_pos = opts.n_slides.div_ceil(2);
    let config = format!(
        r#"slides = "slides"
labels = "labels.csv"
out = "run"
seed = {seed}

[[encoders]]
id = "stub-v1"
dim = 32
kind = "stub"

[tasks]
min_positives = {n_pos}

[tiling]
min_tissue_area_mm2 = 0.05

[training]
epochs = 120
"#,
        seed = opts.seed,
    );
    let path = dir.join("goldmark.toml");
    write_atomic(&path, config.as_bytes())?;
    Ok(path)
}
