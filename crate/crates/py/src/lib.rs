use std::fmt::Display;
use std::path::PathBuf;

use goldmark_core::eval::{auroc_scores, split_summary as summarize};
use goldmark_core::formats::{read_artifact, read_manifest_csv, write_artifact};
use goldmark_core::gma::{infer, GmaModel};
use goldmark_core::pipeline::{generate_synthetic_cohort, run_pipeline, RunConfig, SynthOptions, PIPELINE_VERSION};
use goldmark_core::tiler::{otsu_threshold as otsu, tile_px_for};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A slide's embedding tensor with its header.
#[pyclass(name = "EmbeddingArtifact", frozen)]
struct PyArtifact(goldmark_core::formats::EmbeddingArtifact);

#[pymethods]
impl PyArtifact {
    #[staticmethod]
    #[pyo3(signature = (path, verify = true))]
    fn read(path: PathBuf, verify: bool) -> PyResult<Self> {
        read_artifact(&path, verify).map(PyArtifact).map_err(err)
    }

    /// Writes the artifact and returns its sha256 checksum.
    fn write(&self, path: PathBuf) -> PyResult<String> {
        write_artifact(&self.0, &path).map_err(err)
    }

    #[getter]
    fn slide_id(&self) -> &str {
        &self.0.header.slide_id
    }

    #[getter]
    fn encoder_id(&self) -> &str {
        &self.0.header.encoder_id
    }

    #[getter]
    fn encoder_version(&self) -> &str {
        &self.0.header.encoder_version
    }

    #[getter]
    fn n_tiles(&self) -> usize {
        self.0.n_tiles()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.n_tiles() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.0.row(i).to_vec())
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        self.0.rows().map(<[f32]>::to_vec).collect()
    }

    fn checksum(&self) -> PyResult<String> {
        self.0.checksum().map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.n_tiles()
    }

    fn __repr__(&self) -> String {
        let h = &self.0.header;
        format!("EmbeddingArtifact({} {}, {}x{})", h.slide_id, h.encoder_id, h.n_tiles, h.dim)
    }
}

/// Ordered tile grid of one slide.
#[pyclass(name = "TileManifest", frozen)]
struct PyManifest(goldmark_core::formats::TileManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_manifest_csv(&path).map(PyManifest).map_err(err)
    }

    #[getter]
    fn slide_id(&self) -> &str {
        &self.0.slide_id
    }

    #[getter]
    fn mpp(&self) -> f64 {
        self.0.mpp
    }

    #[getter]
    fn tile_px(&self) -> u32 {
        self.0.tile_px
    }

    /// `(index, x, y, fraction_tissue)` per tile.
    fn tiles(&self) -> Vec<(u32, u32, u32, f64)> {
        self.0.rows.iter().map(|r| (r.index, r.x, r.y, r.fraction_tissue)).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Trained attention head loaded from a weights file.
#[pyclass(name = "Model", frozen)]
struct PyModel(GmaModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        GmaModel::load(&path).map(PyModel).map_err(err)
    }

    #[getter]
    fn task_id(&self) -> &str {
        &self.0.task_id
    }

    #[getter]
    fn encoder_id(&self) -> &str {
        &self.0.encoder_id
    }

    #[getter]
    fn split_index(&self) -> u32 {
        self.0.split_index
    }

    #[getter]
    fn checkpoint_kind(&self) -> &'static str {
        self.0.checkpoint.kind.as_str()
    }

    #[getter]
    fn epoch(&self) -> u32 {
        self.0.checkpoint.epoch
    }

    #[getter]
    fn val_auroc(&self) -> f64 {
        self.0.checkpoint.val_auroc
    }

    /// Slide probabilities and per-tile attention:
    /// `({slide_id: p}, [(slide_id, tile_index, attention)])`.
    #[allow(clippy::type_complexity)]
    fn predict(
        &self,
        artifacts: Vec<PyRef<'_, PyArtifact>>,
    ) -> PyResult<(Vec<(String, f64)>, Vec<(String, u32, f64)>)> {
        let inputs: Vec<_> = artifacts.iter().map(|a| (a.0.header.slide_id.as_str(), &a.0)).collect();
        let out = infer(&self.0, &inputs).map_err(err)?;
        let probs = out.predictions.into_iter().map(|p| (p.slide_id, p.probability)).collect();
        let attn = out.attention.rows.into_iter().map(|r| (r.slide_id, r.tile_index, r.attention)).collect();
        Ok((probs, attn))
    }
}

/// Tile edge in pixels for a field of view of `fov_um` micrometres.
#[pyfunction]
#[pyo3(signature = (mpp, fov_um = 128.0))]
fn tile_size(mpp: f64, fov_um: f64) -> PyResult<u32> {
    tile_px_for(mpp, fov_um).map_err(err)
}

#[pyfunction]
fn otsu_threshold(hist: Vec<u64>) -> PyResult<u8> {
    let hist: [u64; 256] = hist.try_into().map_err(|h: Vec<u64>| err(format!("expected 256 bins, got {}", h.len())))?;
    otsu(&hist).map_err(err)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    auroc_scores(&scores, &labels).map_err(err)
}

/// `(mean, std, ci_low, ci_high)` over the five split AUROCs.
#[pyfunction]
fn split_summary(aurocs: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    let s = summarize(&aurocs).map_err(err)?;
    Ok((s.mean, s.std, s.ci_low, s.ci_high))
}

/// Writes a synthetic cohort and returns the path of its run config.
#[pyfunction]
#[pyo3(signature = (out, n_slides = 6, seed = 7))]
fn synth(out: PathBuf, n_slides: usize, seed: u64) -> PyResult<PathBuf> {
    let opts = SynthOptions { n_slides, seed, ..SynthOptions::default() };
    generate_synthetic_cohort(&out, &opts).map_err(err)
}

type StageCounts = (String, usize, usize);

/// Runs every stage for a config file. Returns the run directory, the run
/// version and `(stage, executed, skipped)` per stage.
#[pyfunction]
fn run(py: Python<'_>, config: PathBuf) -> PyResult<(PathBuf, String, Vec<StageCounts>)> {
    let cfg = RunConfig::load(&config).map_err(err)?;
    let outcome = py.detach(|| run_pipeline(&cfg)).map_err(err)?;
    let stages = outcome.stages.iter().map(|s| (s.stage.to_string(), s.executed, s.skipped)).collect();
    Ok((outcome.run_dir, outcome.run_version, stages))
}

#[pymodule]
#[pyo3(name = "goldmark")]
fn goldmark_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PIPELINE_VERSION", PIPELINE_VERSION)?;
    m.add_class::<PyArtifact>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tile_size, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(split_summary, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
