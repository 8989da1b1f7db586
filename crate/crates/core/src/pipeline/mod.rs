//! End-to-end runs: tile → embed → qc → tasks → split → train → infer → eval,
//! each unit skipped when its inputs and outputs are unchanged, plus the
//! artifact index consumed by the server.

mod config;
mod index;
mod layout;
mod overlay;
mod run;
mod state;
mod synth;

pub use config::{data_dir_override, EncoderConfig, OverlayConfig, RunConfig, TaskFilter, DATA_DIR_ENV};
pub use index::{artifact_id, ArtifactEntry, ArtifactIndex, ArtifactKind, INDEX_FILE};
pub use layout::Layout;
pub use overlay::{attention_overlay_image, export_attention_overlay, percentile, shaded_tiles, SHADE_COLOR};
pub use run::{
    discover_slides, embed_slide, qc_encoder, read_tasks_csv, run_pipeline, tile_one, write_tasks_csv, RunOutcome,
    StageReport, TileOutcome,
};
pub use state::{is_fresh, record, InputDigest, UnitState};
pub use synth::{generate_synthetic_cohort, SynthOptions, SYNTH_COHORT, SYNTH_TASK};

use crate::cohort::CohortError;
use crate::embed::EmbedError;
use crate::eval::EvalError;
use crate::formats::FormatError;
use crate::gma::GmaError;
use crate::qc::QcError;
use crate::tiler::TilingError;

pub const PIPELINE_VERSION: &str = concat!("goldmark-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("attention overlay: {0}")]
    Alignment(String),
    #[error("index: {0}")]
    Index(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Qc(#[from] QcError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Gma(#[from] GmaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
