use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cohort::{SplitConfig, DEFAULT_MIN_POSITIVES};
use crate::embed::{EncoderKind, EncoderSpec, MetadataConfig};
use crate::gma::{CheckpointKind, TrainingConfig};
use crate::tiler::TilingConfig;

/// Environment variable overriding the base directory for relative paths.
pub const DATA_DIR_ENV: &str = "GOLDMARK_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub id: String,
    #[serde(default = "default_encoder_version")]
    pub version: String,
    pub dim: usize,
    pub kind: EncoderKind,
    /// Ingested encoders: directory of `<slide_id>.f32` raw tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
}

fn default_encoder_version() -> String {
    "1".into()
}

impl EncoderConfig {
    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            encoder_id: self.id.clone(),
            encoder_version: self.version.clone(),
            dim: self.dim,
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskFilter {
    /// Task ids to consider; empty means every task in the label file.
    pub include: Vec<String>,
    pub min_positives: usize,
}

impl Default for TaskFilter {
    fn default() -> Self {
        TaskFilter { include: Vec::new(), min_positives: DEFAULT_MIN_POSITIVES }
    }
}

impl TaskFilter {
    pub fn accepts(&self, task_id: &str) -> bool {
        self.include.is_empty() || self.include.iter().any(|t| t == task_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayConfig {
    pub percentile: f64,
    pub split: u32,
    pub checkpoint: CheckpointKind,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig { percentile: 90.0, split: 0, checkpoint: CheckpointKind::BestAuc }
    }
}

/// Declarative run configuration (TOML). Relative paths are resolved against
/// `GOLDMARK_DATA_DIR` when set, else the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub slides: PathBuf,
    pub labels: PathBuf,
    pub external_slides: Option<PathBuf>,
    pub external_labels: Option<PathBuf>,
    pub out: PathBuf,
    /// Drives splits, stub encoders and training; `training.seed` is set from it.
    pub seed: u64,
    pub encoders: Vec<EncoderConfig>,
    pub tasks: TaskFilter,
    pub tiling: TilingConfig,
    pub splits: SplitConfig,
    pub training: TrainingConfig,
    pub qc: MetadataConfig,
    pub overlay: OverlayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            slides: "slides".into(),
            labels: "labels.csv".into(),
            external_slides: None,
            external_labels: None,
            out: "run".into(),
            seed: 0,
            encoders: vec![EncoderConfig {
                id: "stub-v1".into(),
                version: default_encoder_version(),
                dim: 64,
                kind: EncoderKind::Stub,
                source: None,
            }],
            tasks: TaskFilter::default(),
            tiling: TilingConfig::default(),
            splits: SplitConfig::default(),
            training: TrainingConfig::default(),
            qc: MetadataConfig::default(),
            overlay: OverlayConfig::default(),
        }
    }
}

pub fn data_dir_override() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parses, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = match data_dir_override() {
            Some(d) => d,
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base` and fixes derived fields.
    pub fn resolve(&mut self, base: &Path) {
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.slides);
        fix(&mut self.labels);
        fix(&mut self.out);
        self.external_slides.iter_mut().for_each(fix);
        self.external_labels.iter_mut().for_each(fix);
        for e in &mut self.encoders {
            e.source.iter_mut().for_each(fix);
        }
        self.training.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.encoders.is_empty() {
            return Err(PipelineError::Config("at least one encoder is required".into()));
        }
        let mut ids: Vec<&str> = self.encoders.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::Config("duplicate encoder id".into()));
        }
        for e in &self.encoders {
            if e.dim == 0 || e.id.is_empty() || e.id.contains(['/', '\\']) {
                return Err(PipelineError::Config(format!("bad encoder entry `{}`", e.id)));
            }
            if e.kind == EncoderKind::Ingested && e.source.is_none() {
                return Err(PipelineError::Config(format!("ingested encoder `{}` needs `source`", e.id)));
            }
        }
        if self.external_slides.is_some() != self.external_labels.is_some() {
            return Err(PipelineError::Config("external_slides and external_labels go together".into()));
        }
        if !(0.0..=100.0).contains(&self.overlay.percentile) {
            return Err(PipelineError::Config("overlay.percentile must be in [0, 100]".into()));
        }
        self.tiling.validate()?;
        self.training.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Digest of the resolved configuration; part of every run version.
    pub fn digest(&self) -> Result<String, PipelineError> {
        Ok(crate::io::sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn encoder(&self, id: &str) -> Option<&EncoderConfig> {
        self.encoders.iter().find(|e| e.id == id)
    }
}
