use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, RunConfig};
use super::index::ArtifactIndex;
use super::layout::Layout;
use super::overlay::export_attention_overlay;
use super::state::{is_fresh, record, InputDigest};
use super::{PipelineError, PIPELINE_VERSION};
use crate::cohort::{define_tasks, make_splits, TaskDefinition};
use crate::embed::{ingest_embeddings, stub_encode, EncoderKind, MetadataConfig};
use crate::eval::{evaluate, write_predictions, Context, PredictionRecord};
use crate::formats::{
    metadata_path, read_artifact, read_labels_csv, read_manifest_csv, read_splits_csv, with_suffix, write_artifact,
    write_manifest_csv, write_splits_csv, Assignment, EmbeddingArtifact, LabelManifest, SlideRecord, TileManifest,
    FAILED_SUFFIX,
};
use crate::gma::{infer, train, write_training_log, CheckpointKind, GmaModel, LabeledBag};
use crate::io::write_atomic;
use crate::qc::{build_run_manifest, resolve_artifact, run_qc, QcReport, QcTarget, RunManifest};
use crate::tiler::{detect_tissue, render_overlay, tile_slide, TilingConfig, TilingError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub executed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub run_version: String,
    pub stages: Vec<StageReport>,
    pub index: ArtifactIndex,
}

impl RunOutcome {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Every `*.res.json` sidecar in `dir`, loaded and sorted by slide id.
pub fn discover_slides(dir: &Path) -> Result<Vec<(SlideRecord, PathBuf)>, PipelineError> {
    let mut out = Vec::new();
    for entry in
        std::fs::read_dir(dir).map_err(|e| PipelineError::Config(format!("slide directory {}: {e}", dir.display())))?
    {
        let p = entry?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".res.json")) {
            out.push((SlideRecord::from_sidecar(&p)?, p));
        }
    }
    out.sort_by(|a, b| a.0.slide_id.cmp(&b.0.slide_id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TileOutcome {
    Tiled(TileManifest),
    Rejected(String),
}

#[derive(Serialize, Deserialize)]
struct Rejection {
    slide_id: String,
    reason: String,
}

/// Tiles one slide, writing its manifest and overlay, or a rejection record
/// when the slide has too little tissue or no qualifying tile.
pub fn tile_one(
    slide: &SlideRecord,
    cfg: &TilingConfig,
    layout: &Layout,
) -> Result<(TileOutcome, Vec<PathBuf>), PipelineError> {
    let manifest_path = layout.tile_manifest(&slide.slide_id);
    let overlay_path = layout.overlay(&slide.slide_id);
    let rejection_path = layout.rejection(&slide.slide_id);
    for p in [&manifest_path, &overlay_path, &rejection_path] {
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let reject = |reason: String| -> Result<(TileOutcome, Vec<PathBuf>), PipelineError> {
        let mut bytes =
            serde_json::to_vec_pretty(&Rejection { slide_id: slide.slide_id.clone(), reason: reason.clone() })?;
        bytes.push(b'\n');
        write_atomic(&rejection_path, &bytes)?;
        Ok((TileOutcome::Rejected(reason), vec![rejection_path.clone()]))
    };
    let mask = detect_tissue(slide, cfg)?;
    let manifest = match tile_slide(slide, &mask, cfg) {
        Ok(m) => m,
        Err(e @ TilingError::SlideRejected { .. }) => return reject(e.to_string()),
        Err(e) => return Err(e.into()),
    };
    if manifest.is_empty() {
        return reject("no tile reaches the minimum tissue fraction".into());
    }
    write_manifest_csv(&manifest, &manifest_path)?;
    render_overlay(slide, &manifest, &overlay_path)?;
    Ok((TileOutcome::Tiled(manifest), vec![manifest_path, overlay_path]))
}

/// Produces one embedding artifact (and sidecar). Returns `None` when an
/// ingested encoder has no raw tensor for the slide.
pub fn embed_slide(
    slide: &SlideRecord,
    manifest: &TileManifest,
    encoder: &EncoderConfig,
    seed: u64,
) -> Result<Option<EmbeddingArtifact>, PipelineError> {
    let spec = encoder.spec();
    match encoder.kind {
        EncoderKind::Stub => Ok(Some(stub_encode(slide, manifest, &spec, seed)?)),
        EncoderKind::Ingested => {
            let raw = raw_source(encoder, &slide.slide_id);
            if !raw.exists() {
                return Ok(None);
            }
            let bytes = std::fs::metadata(&raw)?.len() as usize;
            let row_bytes = 4 * spec.dim;
            if !bytes.is_multiple_of(row_bytes) {
                return Err(PipelineError::Stage {
                    stage: "embed".into(),
                    message: format!("{}: {bytes} bytes is not a whole number of {}-dim rows", raw.display(), spec.dim),
                });
            }
            Ok(Some(ingest_embeddings(&raw, manifest, &spec, bytes / row_bytes, spec.dim)?))
        }
    }
}

fn raw_source(encoder: &EncoderConfig, slide_id: &str) -> PathBuf {
    encoder.source.clone().unwrap_or_default().join(format!("{slide_id}.f32"))
}

/// QC targets for one encoder over the tiled slides.
fn qc_targets(layout: &Layout, encoder: &str, tiled: &[(SlideRecord, TileManifest)]) -> Vec<QcTarget> {
    tiled
        .iter()
        .map(|(s, m)| QcTarget {
            slide_id: s.slide_id.clone(),
            encoder_id: encoder.to_string(),
            manifest: Some(m.clone()),
            emb_path: layout.embedding(encoder, &s.slide_id),
        })
        .collect()
}

/// Audits one encoder's artifacts, quarantining failures, and writes the report.
pub fn qc_encoder(
    layout: &Layout,
    encoder: &str,
    tiled: &[(SlideRecord, TileManifest)],
    cfg: &MetadataConfig,
) -> Result<QcReport, PipelineError> {
    let report = run_qc(&qc_targets(layout, encoder, tiled), cfg, true)?;
    report.write_csv(&layout.qc_report(encoder))?;
    Ok(report)
}

pub fn write_tasks_csv(tasks: &[TaskDefinition], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in tasks {
        w.serialize(t)?;
    }
    if tasks.is_empty() {
        w.write_record(["task_id", "cohort_id", "n_total", "n_positive", "n_negative", "included"])?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_tasks_csv(path: &Path) -> Result<Vec<TaskDefinition>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

struct Stage {
    report: StageReport,
}

impl Stage {
    fn new(name: &str) -> Self {
        Stage { report: StageReport { stage: name.to_string(), executed: 0, skipped: 0 } }
    }

    fn tally(&mut self, executed: bool) {
        if executed {
            self.report.executed += 1;
        } else {
            self.report.skipped += 1;
        }
    }
}

fn halt(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage: stage.to_string(), message: e.to_string() }
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    layout: Layout,
    stages: Vec<StageReport>,
}

/// Runs every stage in order. On failure the index of what exists so far is
/// still written before the error is returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    std::fs::create_dir_all(layout.root())?;
    let digest = cfg.digest()?;
    let run_version = format!("{PIPELINE_VERSION}+{}", &digest[..12]);
    let resolved = format!(
        "# resolved configuration\npipeline_version = \"{PIPELINE_VERSION}\"\nrun_version = \"{run_version}\"\n{}",
        cfg.to_toml()?
    );
    write_atomic(&layout.resolved_config(), resolved.as_bytes())?;

    let mut runner = Runner { cfg, layout: layout.clone(), stages: Vec::new() };
    let result = runner.run_all();
    let task_ids: Vec<String> =
        read_tasks_csv(&layout.tasks_csv()).map(|ts| ts.into_iter().map(|t| t.task_id).collect()).unwrap_or_default();
    let index = ArtifactIndex::scan(layout.root(), &run_version, &task_ids)?;
    index.write(layout.root())?;
    result?;
    Ok(RunOutcome { run_dir: layout.root.clone(), run_version, stages: runner.stages, index })
}

struct Cohort {
    internal: Vec<(SlideRecord, PathBuf)>,
    external: Vec<(SlideRecord, PathBuf)>,
}

impl Runner<'_> {
    fn run_all(&mut self) -> Result<(), PipelineError> {
        let cohort = Cohort {
            internal: discover_slides(&self.cfg.slides)?,
            external: match &self.cfg.external_slides {
                Some(d) => discover_slides(d)?,
                None => Vec::new(),
            },
        };
        let mut seen = HashSet::new();
        for (s, _) in cohort.internal.iter().chain(&cohort.external) {
            if !seen.insert(s.slide_id.as_str()) {
                return Err(PipelineError::Config(format!("duplicate slide id {}", s.slide_id)));
            }
        }
        let tiled = self.tile(&cohort)?;
        self.embed(&tiled)?;
        let qc = self.qc(&tiled)?;
        let internal_ids: HashSet<&str> = cohort.internal.iter().map(|(s, _)| s.slide_id.as_str()).collect();
        let internal_tiled: Vec<&SlideRecord> =
            tiled.iter().map(|(s, _)| s).filter(|s| internal_ids.contains(s.slide_id.as_str())).collect();
        let (tasks, labels) = self.tasks(&internal_tiled, &qc)?;
        self.split(&tasks, &labels)?;
        self.train(&tasks)?;
        let manifests: HashMap<&str, (&SlideRecord, &TileManifest)> =
            tiled.iter().map(|(s, m)| (s.slide_id.as_str(), (s, m))).collect();
        self.infer(&tasks, &labels, &manifests, &qc)?;
        self.eval(&tasks)?;
        Ok(())
    }

    fn tile(&mut self, cohort: &Cohort) -> Result<Vec<(SlideRecord, TileManifest)>, PipelineError> {
        let mut stage = Stage::new("tile");
        let all: Vec<&(SlideRecord, PathBuf)> = cohort.internal.iter().chain(&cohort.external).collect();
        let outcomes = all
            .par_iter()
            .map(|(slide, sidecar)| {
                let mut d = InputDigest::new("tile");
                d.file("image", &slide.source_path)?.file("sidecar", sidecar)?.json("tiling", &self.cfg.tiling)?;
                let digest = d.finish();
                if is_fresh(self.layout.root(), "tile", &slide.slide_id, &digest) {
                    let p = self.layout.tile_manifest(&slide.slide_id);
                    let outcome = if p.exists() {
                        TileOutcome::Tiled(read_manifest_csv(&p)?)
                    } else {
                        TileOutcome::Rejected("previously rejected".into())
                    };
                    return Ok((slide, outcome, false));
                }
                let (outcome, outputs) =
                    tile_one(slide, &self.cfg.tiling, &self.layout).map_err(|e| halt("tile", e))?;
                record(self.layout.root(), "tile", &slide.slide_id, &digest, &outputs)?;
                Ok((slide, outcome, true))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let mut tiled = Vec::new();
        for (slide, outcome, executed) in outcomes {
            stage.tally(executed);
            if let TileOutcome::Tiled(m) = outcome {
                tiled.push((slide.clone(), m));
            }
        }
        self.stages.push(stage.report);
        Ok(tiled)
    }

    fn embed(&mut self, tiled: &[(SlideRecord, TileManifest)]) -> Result<(), PipelineError> {
        let mut stage = Stage::new("embed");
        for enc in &self.cfg.encoders {
            let executed = tiled
                .par_iter()
                .map(|(slide, manifest)| {
                    let unit = format!("{}/{}", enc.id, slide.slide_id);
                    let mut d = InputDigest::new("embed");
                    d.file("manifest", &self.layout.tile_manifest(&slide.slide_id))?
                        .json("encoder", enc)?
                        .add("seed", self.cfg.seed.to_string());
                    match enc.kind {
                        EncoderKind::Stub => d.file("image", &slide.source_path)?,
                        EncoderKind::Ingested => d.file("raw", &raw_source(enc, &slide.slide_id))?,
                    };
                    let digest = d.finish();
                    if is_fresh(self.layout.root(), "embed", &unit, &digest) {
                        return Ok(false);
                    }
                    let path = self.layout.embedding(&enc.id, &slide.slide_id);
                    for p in [path.clone(), metadata_path(&path)] {
                        for q in [with_suffix(&p, FAILED_SUFFIX), p] {
                            if q.exists() {
                                std::fs::remove_file(q)?;
                            }
                        }
                    }
                    let outputs =
                        match embed_slide(slide, manifest, enc, self.cfg.seed).map_err(|e| halt("embed", e))? {
                            Some(artifact) => {
                                write_artifact(&artifact, &path)?;
                                vec![path.clone(), metadata_path(&path)]
                            }
                            None => Vec::new(),
                        };
                    record(self.layout.root(), "embed", &unit, &digest, &outputs)?;
                    Ok(true)
                })
                .collect::<Result<Vec<bool>, PipelineError>>()?;
            executed.into_iter().for_each(|e| stage.tally(e));
        }
        self.stages.push(stage.report);
        Ok(())
    }

    fn qc(&mut self, tiled: &[(SlideRecord, TileManifest)]) -> Result<BTreeMap<String, QcReport>, PipelineError> {
        let mut stage = Stage::new("qc");
        let mut reports = BTreeMap::new();
        for enc in &self.cfg.encoders {
            let mut d = InputDigest::new("qc");
            d.json("qc", &self.cfg.qc)?;
            for (slide, _) in tiled {
                let emb = self.layout.embedding(&enc.id, &slide.slide_id);
                d.add("slide", slide.slide_id.clone())
                    .file("manifest", &self.layout.tile_manifest(&slide.slide_id))?
                    .file("embedding", &emb)?
                    .file("metadata", &metadata_path(&emb))?;
            }
            let digest = d.finish();
            let report_path = self.layout.qc_report(&enc.id);
            let fresh = is_fresh(self.layout.root(), "qc", &enc.id, &digest);
            let report = if fresh {
                let mut r = QcReport::read_csv(&report_path)?;
                r.missing = tiled
                    .iter()
                    .filter(|(s, _)| resolve_artifact(&self.layout.embedding(&enc.id, &s.slide_id)).is_none())
                    .map(|(s, _)| (s.slide_id.clone(), enc.id.clone()))
                    .collect();
                r
            } else {
                let r = qc_encoder(&self.layout, &enc.id, tiled, &self.cfg.qc).map_err(|e| halt("qc", e))?;
                record(self.layout.root(), "qc", &enc.id, &digest, &[report_path])?;
                r
            };
            stage.tally(!fresh);
            reports.insert(enc.id.clone(), report);
        }
        self.stages.push(stage.report);
        Ok(reports)
    }

    fn tasks(
        &mut self,
        internal_tiled: &[&SlideRecord],
        qc: &BTreeMap<String, QcReport>,
    ) -> Result<(Vec<TaskDefinition>, LabelManifest), PipelineError> {
        let mut stage = Stage::new("tasks");
        let tiled_ids: BTreeSet<&str> = internal_tiled.iter().map(|s| s.slide_id.as_str()).collect();
        let all_labels = read_labels_csv(&self.cfg.labels)?;
        // Labels of slides rejected at tiling are dropped; unknown slides stay
        // and are reported by task definition.
        let rejected: BTreeSet<String> = all_labels
            .rows
            .iter()
            .filter(|r| !tiled_ids.contains(r.slide_id.as_str()) && self.layout.rejection(&r.slide_id).exists())
            .map(|r| r.slide_id.clone())
            .collect();
        let labels = all_labels.restricted(|s| !rejected.contains(s));
        let labels =
            LabelManifest::new(labels.rows.into_iter().filter(|r| self.cfg.tasks.accepts(&r.task_id)).collect())?;

        let mut d = InputDigest::new("tasks");
        d.json("labels", &labels)?.json("slides", &tiled_ids)?.json("filter", &self.cfg.tasks)?;
        for enc in &self.cfg.encoders {
            d.file("qc", &self.layout.qc_report(&enc.id))?;
        }
        let digest = d.finish();
        // Tasks and splits use slides that pass QC for every encoder, so all
        // encoders are compared on the same patients.
        let passing: HashSet<String> = tiled_ids
            .iter()
            .filter(|s| qc.iter().all(|(enc, r)| r.get(s, enc).is_some_and(|row| row.status.is_pass())))
            .map(|s| s.to_string())
            .collect();
        let usable = labels.restricted(|s| passing.contains(s));
        if is_fresh(self.layout.root(), "tasks", "tasks", &digest) {
            stage.tally(false);
            self.stages.push(stage.report);
            return Ok((read_tasks_csv(&self.layout.tasks_csv())?, usable));
        }

        let slides: Vec<SlideRecord> = internal_tiled.iter().map(|s| (*s).clone()).collect();
        let tasks = define_tasks(&labels, &slides, Some(&passing), self.cfg.tasks.min_positives)
            .map_err(|e| halt("tasks", e))?;
        let mut cohorts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &tasks {
            *cohorts.entry(&t.task_id).or_default() += 1;
        }
        if let Some((t, _)) = cohorts.iter().find(|(_, &n)| n > 1) {
            return Err(halt("tasks", format!("task {t} spans several cohorts in the training labels")));
        }
        let mut outputs = vec![self.layout.tasks_csv()];
        for task in tasks.iter().filter(|t| t.included) {
            let slide_ids: Vec<&str> = labels.for_task(&task.task_id).map(|r| r.slide_id.as_str()).collect();
            for enc in &self.cfg.encoders {
                let m = build_run_manifest(&task.task_id, None, &enc.id, &slide_ids, &qc[&enc.id])
                    .map_err(|e| halt("tasks", e))?;
                let p = self.layout.run_manifest(&task.task_id, &enc.id);
                write_atomic(&p, &m.to_json_bytes()?)?;
                outputs.push(p);
            }
        }
        write_tasks_csv(&tasks, &self.layout.tasks_csv())?;
        record(self.layout.root(), "tasks", "tasks", &digest, &outputs)?;
        stage.tally(true);
        self.stages.push(stage.report);
        Ok((tasks, usable))
    }

    fn split(&mut self, tasks: &[TaskDefinition], labels: &LabelManifest) -> Result<(), PipelineError> {
        let mut stage = Stage::new("split");
        for task in tasks.iter().filter(|t| t.included) {
            let rows = LabelManifest::new(labels.for_task(&task.task_id).cloned().collect())?;
            let mut d = InputDigest::new("split");
            d.json("task", task)?
                .json("labels", &rows)?
                .add("seed", self.cfg.seed.to_string())
                .json("splits", &self.cfg.splits)?;
            let digest = d.finish();
            let fresh = is_fresh(self.layout.root(), "split", &task.task_id, &digest);
            if !fresh {
                let splits = make_splits(task, &rows, self.cfg.seed, &self.cfg.splits).map_err(|e| halt("split", e))?;
                let p = self.layout.splits(&task.task_id);
                write_splits_csv(&splits, &p)?;
                record(self.layout.root(), "split", &task.task_id, &digest, &[p])?;
            }
            stage.tally(!fresh);
        }
        self.stages.push(stage.report);
        Ok(())
    }

    fn load_run_manifest(&self, task: &str, enc: &str) -> Result<RunManifest, PipelineError> {
        Ok(serde_json::from_slice(&std::fs::read(self.layout.run_manifest(task, enc))?)?)
    }

    fn train(&mut self, tasks: &[TaskDefinition]) -> Result<(), PipelineError> {
        let mut stage = Stage::new("train");
        let n_splits = self.cfg.splits.n_splits as u32;
        for task in tasks.iter().filter(|t| t.included) {
            for enc in &self.cfg.encoders {
                let unit = format!("{}/{}", enc.id, task.task_id);
                let run = self.load_run_manifest(&task.task_id, &enc.id)?;
                let mut d = InputDigest::new("train");
                d.file("splits", &self.layout.splits(&task.task_id))?
                    .file("run", &self.layout.run_manifest(&task.task_id, &enc.id))?
                    .json("training", &self.cfg.training)?;
                for s in &run.slides {
                    d.file(s, &self.layout.embedding(&enc.id, s))?;
                }
                let digest = d.finish();
                let fresh = is_fresh(self.layout.root(), "train", &unit, &digest);
                if !fresh {
                    let outputs = self.train_unit(task, enc, &run, n_splits).map_err(|e| halt("train", e))?;
                    record(self.layout.root(), "train", &unit, &digest, &outputs)?;
                }
                stage.tally(!fresh);
            }
        }
        self.stages.push(stage.report);
        Ok(())
    }

    fn train_unit(
        &self,
        task: &TaskDefinition,
        enc: &EncoderConfig,
        run: &RunManifest,
        n_splits: u32,
    ) -> Result<Vec<PathBuf>, PipelineError> {
        let splits = read_splits_csv(&self.layout.splits(&task.task_id))?;
        let labels = read_labels_csv(&self.cfg.labels)?;
        let by_slide: HashMap<&str, (&str, u8)> =
            labels.for_task(&task.task_id).map(|r| (r.slide_id.as_str(), (r.patient_id.as_str(), r.label))).collect();
        let artifacts = run
            .slides
            .iter()
            .map(|s| read_artifact(&self.layout.embedding(&enc.id, s), true).map(|a| (s.as_str(), a)))
            .collect::<Result<Vec<_>, _>>()?;
        let bags: Vec<LabeledBag<'_>> = artifacts
            .iter()
            .map(|(s, a)| {
                let (patient_id, label) = by_slide[s];
                LabeledBag { slide_id: s, patient_id, label, artifact: Some(a), qc_pass: true }
            })
            .collect();
        let result = train(&task.task_id, &enc.id, &splits, &bags, &self.cfg.training)?;
        let mut outputs = Vec::new();
        for model in result.models() {
            let p = self.layout.weights(&enc.id, &task.task_id, model.split_index, model.checkpoint.kind);
            model.save(&p)?;
            outputs.push(p);
        }
        let log: Vec<_> = result.log().cloned().collect();
        let log_path = self.layout.train_log(&enc.id, &task.task_id);
        write_training_log(&log, &log_path)?;
        outputs.push(log_path);
        debug_assert_eq!(outputs.len() as u32, 2 * n_splits + 1);
        Ok(outputs)
    }

    fn infer(
        &mut self,
        tasks: &[TaskDefinition],
        labels: &LabelManifest,
        manifests: &HashMap<&str, (&SlideRecord, &TileManifest)>,
        qc: &BTreeMap<String, QcReport>,
    ) -> Result<(), PipelineError> {
        let mut stage = Stage::new("infer");
        let external = match &self.cfg.external_labels {
            Some(p) => Some(read_labels_csv(p)?),
            None => None,
        };
        let n_splits = self.cfg.splits.n_splits as u32;
        for task in tasks.iter().filter(|t| t.included) {
            for enc in &self.cfg.encoders {
                let unit = format!("{}/{}", enc.id, task.task_id);
                let run = self.load_run_manifest(&task.task_id, &enc.id)?;
                let ext_slides: Vec<(&str, &str, u8)> = external
                    .iter()
                    .flat_map(|l| l.for_task(&task.task_id))
                    .filter(|r| manifests.contains_key(r.slide_id.as_str()))
                    .filter(|r| qc[&enc.id].get(&r.slide_id, &enc.id).is_some_and(|q| q.status.is_pass()))
                    .map(|r| (r.slide_id.as_str(), r.patient_id.as_str(), r.label))
                    .collect();
                let mut d = InputDigest::new("infer");
                d.file("splits", &self.layout.splits(&task.task_id))?
                    .file("run", &self.layout.run_manifest(&task.task_id, &enc.id))?
                    .json("external", &ext_slides)?
                    .json("overlay", &self.cfg.overlay)?;
                for s in 0..n_splits {
                    for k in CheckpointKind::ALL {
                        d.file("weights", &self.layout.weights(&enc.id, &task.task_id, s, k))?;
                    }
                }
                for s in run.slides.iter().map(String::as_str).chain(ext_slides.iter().map(|e| e.0)) {
                    d.file(s, &self.layout.embedding(&enc.id, s))?;
                }
                let digest = d.finish();
                let fresh = is_fresh(self.layout.root(), "infer", &unit, &digest);
                if !fresh {
                    let outputs = self
                        .infer_unit(task, enc, &run, labels, &ext_slides, manifests, n_splits)
                        .map_err(|e| halt("infer", e))?;
                    record(self.layout.root(), "infer", &unit, &digest, &outputs)?;
                }
                stage.tally(!fresh);
            }
        }
        self.stages.push(stage.report);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn infer_unit(
        &self,
        task: &TaskDefinition,
        enc: &EncoderConfig,
        run: &RunManifest,
        labels: &LabelManifest,
        ext_slides: &[(&str, &str, u8)],
        manifests: &HashMap<&str, (&SlideRecord, &TileManifest)>,
        n_splits: u32,
    ) -> Result<Vec<PathBuf>, PipelineError> {
        let splits = read_splits_csv(&self.layout.splits(&task.task_id))?;
        let by_slide: HashMap<&str, (&str, u8)> =
            labels.for_task(&task.task_id).map(|r| (r.slide_id.as_str(), (r.patient_id.as_str(), r.label))).collect();
        let load = |s: &str| read_artifact(&self.layout.embedding(&enc.id, s), true);
        let internal: BTreeMap<&str, EmbeddingArtifact> =
            run.slides.iter().map(|s| load(s).map(|a| (s.as_str(), a))).collect::<Result<_, _>>()?;
        let external: BTreeMap<&str, EmbeddingArtifact> =
            ext_slides.iter().map(|e| load(e.0).map(|a| (e.0, a))).collect::<Result<_, _>>()?;

        let ext_meta: HashMap<&str, (&str, u8)> = ext_slides.iter().map(|e| (e.0, (e.1, e.2))).collect();
        let mut outputs = Vec::new();
        let mut predictions = Vec::new();
        for s in 0..n_splits {
            let test: BTreeSet<&str> = splits.patients(s as usize, Assignment::Test).collect();
            let cv: Vec<(&str, &EmbeddingArtifact)> = internal
                .iter()
                .filter(|(id, _)| by_slide.get(*id).is_some_and(|(p, _)| test.contains(p)))
                .map(|(id, a)| (*id, a))
                .collect();
            for kind in CheckpointKind::ALL {
                let model = GmaModel::load(&self.layout.weights(&enc.id, &task.task_id, s, kind))?;
                let out = infer(&model, &cv)?;
                for p in &out.predictions {
                    let (patient, label) = by_slide[p.slide_id.as_str()];
                    predictions.push(PredictionRecord {
                        slide_id: p.slide_id.clone(),
                        patient_id: patient.to_string(),
                        task_id: task.task_id.clone(),
                        split_index: s,
                        checkpoint_kind: kind,
                        context: Context::Cv,
                        probability: p.probability,
                        label,
                    });
                }
                let att_path = self.layout.attention(&enc.id, &task.task_id, s, kind);
                out.attention.write_csv(&att_path)?;
                outputs.push(att_path);
                if s == self.cfg.overlay.split && kind == self.cfg.overlay.checkpoint {
                    for (slide_id, _) in &cv {
                        let (slide, manifest) = manifests[slide_id];
                        let p = self.layout.attention_overlay(&enc.id, &task.task_id, slide_id);
                        let rows: Vec<_> = out.attention.for_slide(slide_id).cloned().collect();
                        export_attention_overlay(slide, manifest, &rows, self.cfg.overlay.percentile, &p)?;
                        outputs.push(p);
                    }
                }
                if !external.is_empty() {
                    let ext: Vec<(&str, &EmbeddingArtifact)> = external.iter().map(|(id, a)| (*id, a)).collect();
                    let out = infer(&model, &ext)?;
                    for p in &out.predictions {
                        let (patient, label) = ext_meta[p.slide_id.as_str()];
                        predictions.push(PredictionRecord {
                            slide_id: p.slide_id.clone(),
                            patient_id: patient.to_string(),
                            task_id: task.task_id.clone(),
                            split_index: s,
                            checkpoint_kind: kind,
                            context: Context::External,
                            probability: p.probability,
                            label,
                        });
                    }
                }
            }
        }
        let p = self.layout.predictions(&enc.id, &task.task_id);
        write_predictions(&predictions, &p)?;
        outputs.push(p);
        Ok(outputs)
    }

    fn eval(&mut self, tasks: &[TaskDefinition]) -> Result<(), PipelineError> {
        let mut stage = Stage::new("eval");
        let mut d = InputDigest::new("eval");
        let mut files = Vec::new();
        for task in tasks.iter().filter(|t| t.included) {
            for enc in &self.cfg.encoders {
                let p = self.layout.predictions(&enc.id, &task.task_id);
                d.file(&enc.id, &p)?;
                files.push((enc.id.clone(), p));
            }
        }
        let digest = d.finish();
        let fresh = is_fresh(self.layout.root(), "eval", "eval", &digest);
        if !fresh {
            let mut tables: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
            for (enc, p) in files {
                tables.entry(enc).or_default().extend(crate::eval::read_predictions(&p)?);
            }
            let tables: Vec<(String, Vec<PredictionRecord>)> = tables.into_iter().collect();
            let report = evaluate(&tables).map_err(|e| halt("eval", e))?;
            let outputs = report.write_to(&self.layout.metrics_dir())?;
            record(self.layout.root(), "eval", "eval", &digest, &outputs)?;
        }
        stage.tally(!fresh);
        self.stages.push(stage.report);
        Ok(())
    }
}
