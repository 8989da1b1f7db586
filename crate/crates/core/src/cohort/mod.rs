//! Task definitions and patient-level stratified splits.
//!
//! A patient is positive for a task when any of their slides is positive.
//! Splits stratify on that patient label and never separate a patient's slides.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::formats::{Assignment, LabelManifest, SlideRecord, SplitManifest};

pub const DEFAULT_MIN_POSITIVES: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("label rows reference unknown slides: {}", .0.join(", "))]
    UnknownSlides(Vec<String>),
    #[error("slide {slide_id}: label says patient {label_patient}, slide record says {slide_patient}")]
    PatientConflict { slide_id: String, label_patient: String, slide_patient: String },
    #[error("malformed task id `{0}` (expected TUMOR:GENE)")]
    BadTaskId(String),
    #[error("task {0} is not included (too few positives)")]
    NotIncluded(String),
    #[error("task {task_id} cannot be split: class {class} has {count} patient(s), need at least 2")]
    Unsplittable { task_id: String, class: u8, count: usize },
    #[error("labels for task {0} disagree with its definition counts")]
    CountMismatch(String),
    #[error("invalid split config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub task_id: String,
    pub cohort_id: String,
    pub n_total: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub included: bool,
}

impl TaskDefinition {
    pub fn tumor(&self) -> &str {
        self.task_id.split_once(':').map_or("", |(t, _)| t)
    }
}

fn check_task_id(task_id: &str) -> Result<(), CohortError> {
    match task_id.split_once(':') {
        Some((t, g)) if !t.is_empty() && !g.is_empty() && !g.contains(':') => Ok(()),
        _ => Err(CohortError::BadTaskId(task_id.to_string())),
    }
}

/// Patient-level labels (any-positive) for one task, sorted by patient id.
pub fn patient_labels(labels: &LabelManifest, task_id: &str) -> BTreeMap<String, u8> {
    let mut out: BTreeMap<String, u8> = BTreeMap::new();
    for row in labels.for_task(task_id) {
        let e = out.entry(row.patient_id.clone()).or_insert(0);
        *e = (*e).max(row.label);
    }
    out
}

/// One [`TaskDefinition`] per distinct `(task_id, cohort_id)`, counting patients
/// that have at least one slide in `passing` (all slides when `None`).
///
/// Every label row must reference a known slide; unknown slides are a hard error.
pub fn define_tasks(
    labels: &LabelManifest,
    slides: &[SlideRecord],
    passing: Option<&HashSet<String>>,
    min_positives: usize,
) -> Result<Vec<TaskDefinition>, CohortError> {
    let by_id: HashMap<&str, &SlideRecord> = slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let unknown: Vec<String> = labels
        .rows
        .iter()
        .filter(|r| !by_id.contains_key(r.slide_id.as_str()))
        .map(|r| r.slide_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        return Err(CohortError::UnknownSlides(unknown));
    }

    // (task, cohort) -> patient -> any-positive label
    let mut groups: BTreeMap<(String, String), BTreeMap<String, u8>> = BTreeMap::new();
    for row in &labels.rows {
        check_task_id(&row.task_id)?;
        let slide = by_id[row.slide_id.as_str()];
        if slide.patient_id != row.patient_id {
            return Err(CohortError::PatientConflict {
                slide_id: row.slide_id.clone(),
                label_patient: row.patient_id.clone(),
                slide_patient: slide.patient_id.clone(),
            });
        }
        let group = groups.entry((row.task_id.clone(), slide.cohort_id.clone())).or_default();
        if passing.is_some_and(|p| !p.contains(&row.slide_id)) {
            continue;
        }
        let e = group.entry(row.patient_id.clone()).or_insert(0);
        *e = (*e).max(row.label);
    }

    Ok(groups
        .into_iter()
        .map(|((task_id, cohort_id), patients)| {
            let n_positive = patients.values().filter(|&&l| l == 1).count();
            let n_total = patients.len();
            TaskDefinition {
                task_id,
                cohort_id,
                n_total,
                n_positive,
                n_negative: n_total - n_positive,
                included: n_positive >= min_positives,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_splits: usize,
    pub train_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_splits: 5, train_frac: 0.7 }
    }
}

/// Train count for a class of `n` patients: `train_frac · n`, halves rounded up.
pub fn train_count(n: usize, train_frac: f64) -> usize {
    // The epsilon keeps products like 0.7 * 5 = 3.4999999999999996 on the half.
    ((train_frac * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

fn split_rng(seed: u64, split_index: usize, task_id: &str) -> ChaCha8Rng {
    let digest = crate::io::sha256_hex(format!("{seed}\0{split_index}\0{task_id}").as_bytes());
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(&digest, &mut bytes).expect("sha256 hex");
    ChaCha8Rng::from_seed(bytes)
}

/// Independent stratified reshuffles of the task's patients.
///
/// `labels` should already be restricted to the slides eligible for this task
/// (its cohort, QC-passing); the patient counts must agree with `task`.
pub fn make_splits(
    task: &TaskDefinition,
    labels: &LabelManifest,
    seed: u64,
    cfg: &SplitConfig,
) -> Result<SplitManifest, CohortError> {
    if cfg.n_splits == 0 || !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(CohortError::Config(format!("{cfg:?}")));
    }
    if !task.included {
        return Err(CohortError::NotIncluded(task.task_id.clone()));
    }
    let patients = patient_labels(labels, &task.task_id);
    let mut classes: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (p, &l) in &patients {
        classes[l as usize].push(p);
    }
    if classes[1].len() != task.n_positive || classes[0].len() != task.n_negative {
        return Err(CohortError::CountMismatch(task.task_id.clone()));
    }
    for (class, members) in classes.iter().enumerate() {
        if members.len() < 2 {
            return Err(CohortError::Unsplittable {
                task_id: task.task_id.clone(),
                class: class as u8,
                count: members.len(),
            });
        }
    }
    let splits = (0..cfg.n_splits)
        .map(|s| {
            let mut rng = split_rng(seed, s, &task.task_id);
            let mut split = BTreeMap::new();
            for members in &classes {
                let mut order = members.clone();
                order.shuffle(&mut rng);
                let k = train_count(order.len(), cfg.train_frac);
                for (i, p) in order.into_iter().enumerate() {
                    let side = if i < k { Assignment::Train } else { Assignment::Test };
                    split.insert(p.to_string(), side);
                }
            }
            split
        })
        .collect();
    Ok(SplitManifest::new(task.task_id.clone(), seed, splits))
}
