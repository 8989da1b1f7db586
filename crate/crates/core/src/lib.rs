//! Slide-level computational biomarker pipeline.
//!
//! Stages exchange data only through the artifact formats in [`formats`]:
//!
//! - [`tiler`]: tissue detection and resolution-aware tile manifests
//! - [`embed`]: per-slide embedding tensors and their QC statistics
//! - [`qc`]: cardinality, checksum and variance gating (fail-closed)
//! - [`cohort`]: task definitions and patient-level stratified splits
//! - [`gma`]: gated-attention multiple-instance learning head
//! - [`eval`]: AUROC, PR curves, calibration, split summaries and rankings
//! - [`pipeline`]: resumable end-to-end runs and the artifact index

pub mod cohort;
pub mod embed;
pub mod eval;
pub mod formats;
pub mod gma;
pub mod io;
pub mod pipeline;
pub mod qc;
pub mod tiler;
