use std::collections::{BTreeMap, HashSet};

use goldmark_core::cohort::{define_tasks, make_splits, SplitConfig, DEFAULT_MIN_POSITIVES};
use goldmark_core::formats::{Assignment, EvidenceLevel, LabelManifest, LabelRow, SlideRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TASK: &str = "LUAD:EGFR";

fn slide(slide_id: &str, patient_id: &str) -> SlideRecord {
    SlideRecord {
        slide_id: slide_id.into(),
        patient_id: patient_id.into(),
        cohort_id: "TCGA".into(),
        mpp: 0.5,
        width_px: 1024,
        height_px: 1024,
        source_path: "unused.png".into(),
        preparation: Default::default(),
        stain: Default::default(),
    }
}

/// Patients with one to three slides each. Slide labels of a positive patient
/// may be mixed; the patient counts as positive if any slide is.
fn random_cohort(rng: &mut ChaCha8Rng, n_pos: usize, n_neg: usize) -> (LabelManifest, Vec<SlideRecord>) {
    let (mut rows, mut slides) = (Vec::new(), Vec::new());
    for p in 0..n_pos + n_neg {
        let patient = format!("TCGA-{p:04}");
        let positive = p < n_pos;
        let n_slides = rng.random_range(1..=3);
        let positive_slide = rng.random_range(0..n_slides);
        for s in 0..n_slides {
            let slide_id = format!("{patient}-S{s}");
            rows.push(LabelRow {
                patient_id: patient.clone(),
                slide_id: slide_id.clone(),
                task_id: TASK.into(),
                label: u8::from(positive && (s == positive_slide || rng.random_bool(0.5))),
                evidence_level: EvidenceLevel::L1,
            });
            slides.push(slide(&slide_id, &patient));
        }
    }
    (LabelManifest::new(rows).unwrap(), slides)
}

fn patient_oracle(labels: &LabelManifest) -> BTreeMap<String, u8> {
    let mut out = BTreeMap::new();
    for r in &labels.rows {
        let e = out.entry(r.patient_id.clone()).or_insert(0);
        if r.label == 1 {
            *e = 1;
        }
    }
    out
}

#[test]
fn splits_are_stratified_patient_level_and_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let (n_pos, n_neg) = (rng.random_range(15..80), rng.random_range(2..200));
        let (labels, slides) = random_cohort(&mut rng, n_pos, n_neg);
        let tasks = define_tasks(&labels, &slides, None, DEFAULT_MIN_POSITIVES).unwrap();
        assert_eq!(tasks.len(), 1);
        let task = &tasks[0];
        assert_eq!((task.n_positive, task.n_negative, task.n_total), (n_pos, n_neg, n_pos + n_neg));
        assert!(task.included);

        let seed = rng.random();
        let m = make_splits(task, &labels, seed, &SplitConfig::default()).unwrap();
        assert_eq!(m.splits.len(), 5);
        let truth = patient_oracle(&labels);
        for split in &m.splits {
            assert_eq!(split.keys().collect::<Vec<_>>(), truth.keys().collect::<Vec<_>>());
            for class in [0u8, 1] {
                let members: Vec<&String> = truth.iter().filter(|(_, &l)| l == class).map(|(p, _)| p).collect();
                let train = members.iter().filter(|p| split[p.as_str()] == Assignment::Train).count();
                let target = 0.7 * members.len() as f64;
                assert!((train as f64 - target).abs() <= 1.0, "class {class}: {train} of {}", members.len());
                assert!(train < members.len(), "class {class} has no test patients");
            }
            // Every slide of a patient lands on the patient's side.
            let sides: HashSet<(&str, Assignment)> =
                labels.rows.iter().map(|r| (r.patient_id.as_str(), split[&r.patient_id])).collect();
            assert_eq!(sides.len(), truth.len());
        }
        assert_eq!(make_splits(task, &labels, seed, &SplitConfig::default()).unwrap(), m);
        let other = make_splits(task, &labels, seed.wrapping_add(1), &SplitConfig::default()).unwrap();
        assert_ne!(other.manifest_version, m.manifest_version);
    }
}

#[test]
fn inclusion_flips_at_fifteen_positive_patients() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (n_pos, included) in [(13, false), (14, false), (15, true), (16, true)] {
        let (labels, slides) = random_cohort(&mut rng, n_pos, 40);
        let t = &define_tasks(&labels, &slides, None, DEFAULT_MIN_POSITIVES).unwrap()[0];
        assert_eq!(t.n_positive, n_pos);
        assert_eq!(t.included, included, "{n_pos} positives");
        assert_eq!(make_splits(t, &labels, 0, &SplitConfig::default()).is_ok(), included);
    }
}

#[test]
fn qc_exclusion_can_drop_a_task_below_the_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (labels, slides) = random_cohort(&mut rng, 15, 30);
    let positive_patient = "TCGA-0000";
    let passing: HashSet<String> =
        slides.iter().filter(|s| s.patient_id != positive_patient).map(|s| s.slide_id.clone()).collect();
    let all = &define_tasks(&labels, &slides, None, DEFAULT_MIN_POSITIVES).unwrap()[0];
    let qc = &define_tasks(&labels, &slides, Some(&passing), DEFAULT_MIN_POSITIVES).unwrap()[0];
    assert!(all.included);
    assert_eq!((qc.n_positive, qc.included), (14, false));
}

#[test]
fn unknown_slides_are_rejected() {
    let rows = vec![LabelRow {
        patient_id: "P".into(),
        slide_id: "ghost".into(),
        task_id: TASK.into(),
        label: 1,
        evidence_level: EvidenceLevel::L2,
    }];
    let labels = LabelManifest::new(rows).unwrap();
    assert!(define_tasks(&labels, &[slide("other", "P")], None, 15).is_err());
}
