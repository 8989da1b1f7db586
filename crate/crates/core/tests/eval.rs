use std::collections::BTreeMap;

use goldmark_core::eval::{
    auroc_scores, borda_rank, median, reliability_bins, roc_curve, split_summary, top_k_tasks, MetricTable,
    DEFAULT_BINS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mann–Whitney by enumerating every (positive, negative) pair.
fn all_pairs_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

fn random_predictions(rng: &mut ChaCha8Rng, ties: bool) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let grid = rng.random_range(2..30) as f64;
    let scores = (0..n)
        .map(|_| if ties { (rng.random_range(0.0..1.0) * grid).floor() / grid } else { rng.random_range(0.0..1.0) })
        .collect();
    (scores, labels)
}

fn trapezoid(scores: &[f64], labels: &[u8]) -> f64 {
    let pts = roc_curve(scores, labels).unwrap();
    pts.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[test]
fn auroc_matches_all_pairs_and_ignores_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..1000 {
        let (scores, labels) = random_predictions(&mut rng, case % 2 == 0);
        let a = auroc_scores(&scores, &labels).unwrap();
        assert!((a - all_pairs_auroc(&scores, &labels)).abs() < 1e-12, "case {case}");
        assert!((a - trapezoid(&scores, &labels)).abs() < 1e-12, "case {case}");
        let cubed: Vec<f64> = scores.iter().map(|s| (s - 0.3).powi(3)).collect();
        let logistic: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-8.0 * (s - 0.5)).exp())).collect();
        assert_eq!(auroc_scores(&cubed, &labels).unwrap(), a);
        assert_eq!(auroc_scores(&logistic, &labels).unwrap(), a);
    }
}

#[test]
fn flipping_labels_complements_auroc_without_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let (scores, labels) = random_predictions(&mut rng, false);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let (a, b) = (auroc_scores(&scores, &labels).unwrap(), auroc_scores(&scores, &flipped).unwrap());
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn reliability_bins_partition_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..200 {
        let (mut scores, labels) = random_predictions(&mut rng, true);
        scores[0] = 1.0;
        let bins = reliability_bins(&scores, &labels, DEFAULT_BINS).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), scores.len() as u64);
        let positives: f64 = bins.iter().map(|b| b.count as f64 * b.observed_rate.unwrap_or(0.0)).sum();
        let expected = labels.iter().filter(|&&l| l == 1).count() as f64;
        assert!((positives - expected).abs() < 1e-9);
        for b in &bins {
            if let Some(m) = b.mean_predicted {
                assert!(m >= b.lower - 1e-12 && m <= b.upper + 1e-12, "{m} in [{}, {}]", b.lower, b.upper);
            } else {
                assert_eq!(b.count, 0);
            }
        }
        assert!(bins[9].count >= 1, "1.0 belongs to the last, closed bin");
    }
}

/// Rank sums by sorting each task's row and averaging positions within tie groups.
fn borda_oracle(table: &MetricTable) -> Vec<(String, f64, f64)> {
    let encoders: Vec<String> = table.values().next().unwrap().keys().cloned().collect();
    let mut sums: BTreeMap<String, (f64, f64)> = encoders.iter().map(|e| (e.clone(), (0.0, 0.0))).collect();
    for row in table.values() {
        let mut sorted: Vec<(&String, f64)> = row.iter().map(|(e, &v)| (e, v)).collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1].1 == sorted[i].1 {
                j += 1;
            }
            let rank = (i + 1 + j + 1) as f64 / 2.0;
            for (e, v) in &sorted[i..=j] {
                let s = sums.get_mut(*e).unwrap();
                s.0 += rank;
                s.1 += v;
            }
            i = j + 1;
        }
    }
    let n = table.len() as f64;
    let mut out: Vec<(String, f64, f64)> = sums.into_iter().map(|(e, (r, v))| (e, r, v / n)).collect();
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

fn random_table(rng: &mut ChaCha8Rng) -> MetricTable {
    let n_enc = rng.random_range(2..9);
    let n_task = rng.random_range(1..40);
    (0..n_task)
        .map(|t| {
            let row = (0..n_enc).map(|e| (format!("enc-{e}"), f64::from(rng.random_range(8..20u32)) / 20.0)).collect();
            (format!("T{t:02}:G"), row)
        })
        .collect()
}

#[test]
fn borda_matches_sort_oracle_and_ignores_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..500 {
        let table = random_table(&mut rng);
        let got = borda_rank(&table).unwrap();
        let want = borda_oracle(&table);
        assert_eq!(got.len(), want.len());
        for (g, (e, r, m)) in got.iter().zip(&want) {
            assert_eq!(&g.encoder_id, e);
            assert_eq!(g.rank_sum, *r);
            assert!((g.mean_auroc - m).abs() < 1e-12);
            assert_eq!(g.n_tasks, table.len());
        }
        let rescaled: MetricTable = table
            .iter()
            .map(|(t, row)| {
                let (a, b) = (rng.random_range(0.1..3.0), rng.random_range(-1.0..1.0));
                (t.clone(), row.iter().map(|(e, v)| (e.clone(), a * v * v * v + b)).collect())
            })
            .collect();
        let ranks: Vec<(String, f64)> = got.iter().map(|r| (r.encoder_id.clone(), r.rank_sum)).collect();
        let again: Vec<(String, f64)> =
            borda_rank(&rescaled).unwrap().into_iter().map(|r| (r.encoder_id, r.rank_sum)).collect();
        assert_eq!(again, ranks);
    }
}

#[test]
fn split_summary_fixture() {
    let s = split_summary(&[0.6, 0.7, 0.8, 0.9, 1.0]).unwrap();
    assert!((s.mean - 0.8).abs() < 1e-12);
    assert!((s.std - 0.1581).abs() < 1e-3);
    assert!((s.ci_low - 0.6037).abs() < 1e-3);
    assert!((s.ci_high - 0.9963).abs() < 1e-3);
    assert!(split_summary(&[0.7, 0.8]).is_err());
}

#[test]
fn top_k_uses_brute_force_median() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..50 {
        let table: MetricTable = (0..10)
            .map(|t| {
                let row = (0..6).map(|c| (format!("cell{c}"), f64::from(rng.random_range(10..20u32)) / 20.0)).collect();
                (format!("T{t}:G"), row)
            })
            .collect();
        let mut brute: Vec<(String, f64)> = table
            .iter()
            .map(|(t, row)| {
                let mut v: Vec<f64> = row.values().copied().collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                (t.clone(), (v[2] + v[3]) / 2.0)
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        brute.truncate(8);
        assert_eq!(top_k_tasks(&table, 8).unwrap(), brute);
    }
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[]), None);
}
