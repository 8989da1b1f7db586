use goldmark_core::gma::{forward, forward_full, loss_and_grads, train_split, Bag, GmaParams, TrainingConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_instance(rng: &mut ChaCha8Rng) -> (GmaParams, Vec<f32>, u8) {
    let (n, m, l) = (rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=8));
    let mut p = GmaParams::init(m, l, rng);
    // Wider weights than the default init so attention is far from uniform.
    for x in p.v.iter_mut().chain(p.u.iter_mut()).chain(p.w.iter_mut()).chain(p.wc.iter_mut()) {
        *x *= 2.0;
    }
    let bag: Vec<f32> = (0..n * m).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    (p, bag, rng.random_range(0..=1))
}

fn loss_at(p: &GmaParams, bag: &[f32], label: u8) -> f64 {
    loss_and_grads(p, bag, label).unwrap().0
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..150 {
        let (p, bag, label) = random_instance(&mut rng);
        let (_, g) = loss_and_grads(&p, &bag, label).unwrap();
        let analytic = g.to_flat();
        let flat = p.to_flat();
        for (i, &a) in analytic.iter().enumerate() {
            let mut hi = flat.clone();
            let mut lo = flat.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let fd = (loss_at(&GmaParams::from_flat(p.m, p.l, &hi), &bag, label)
                - loss_at(&GmaParams::from_flat(p.m, p.l, &lo), &bag, label))
                / (2.0 * eps);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn bag_permutation_permutes_attention_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let (p, bag, _) = random_instance(&mut rng);
        let n = bag.len() / p.m;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f32> = perm.iter().flat_map(|&k| bag[k * p.m..(k + 1) * p.m].to_vec()).collect();
        let (p0, a0) = forward(&p, &bag).unwrap();
        let (p1, a1) = forward(&p, &shuffled).unwrap();
        assert!((p0 - p1).abs() < 1e-9, "{p0} vs {p1}");
        for (j, &k) in perm.iter().enumerate() {
            assert!((a1[j] - a0[k]).abs() < 1e-12);
        }
        for a in [&a0, &a1] {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(a.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn attention_is_normalised_for_extreme_scores() {
    let mut p = GmaParams::zeros(2, 1);
    p.w[0] = 500.0;
    p.v[0] = 50.0;
    p.u[0] = 50.0;
    let bag = [10.0f32, 0.0, -10.0, 0.0, 9.0, 1.0];
    let f = forward_full(&p, &bag).unwrap();
    assert!((f.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(f.attention.iter().all(|a| a.is_finite()));
    assert!(f.probability.is_finite());
}

/// 200 bags of 50 tiles in 32 dimensions. Positive bags carry ten tiles
/// shifted by 3σ along a fixed direction; the rest is standard normal noise.
fn planted_bags(seed: u64) -> Vec<(Vec<f32>, u8)> {
    let (n_bags, n_tiles, d, n_signal) = (200, 50, 32, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x *= 3.0 / norm);
    (0..n_bags)
        .map(|b| {
            let label = u8::from(b % 2 == 0);
            let mut bag: Vec<f32> = (0..n_tiles * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if label == 1 {
                let mut tiles: Vec<usize> = (0..n_tiles).collect();
                tiles.shuffle(&mut rng);
                for &k in &tiles[..n_signal] {
                    for (x, s) in bag[k * d..(k + 1) * d].iter_mut().zip(&dir) {
                        *x += *s as f32;
                    }
                }
            }
            (bag, label)
        })
        .collect()
}

/// Stratified 70/30 partition; returns (train, val) borrowed bags.
fn partition(bags: &[(Vec<f32>, u8)], seed: u64) -> (Vec<Bag<'_>>, Vec<Bag<'_>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].1 == class).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * 0.7).round() as usize;
        for (j, &i) in idx.iter().enumerate() {
            let bag = (bags[i].0.as_slice(), bags[i].1);
            if j < cut {
                train.push(bag);
            } else {
                val.push(bag);
            }
        }
    }
    (train, val)
}

#[test]
fn planted_signal_is_learned_and_permuted_labels_are_not() {
    let cfg = TrainingConfig { seed: 3, ..TrainingConfig::default() };
    assert_eq!(cfg.epochs, 120);
    let bags = planted_bags(99);
    let (train, val) = partition(&bags, 1);
    assert_eq!((train.len(), val.len()), (140, 60));
    let run = train_split(&train, &val, 32, &cfg, 0).unwrap();
    assert!(run.best.val_auroc >= 0.95, "best validation AUROC {}", run.best.val_auroc);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut finals = Vec::new();
    for rep in 0..3 {
        let mut labels: Vec<u8> = bags.iter().map(|b| b.1).collect();
        labels.shuffle(&mut rng);
        let permuted: Vec<(Vec<f32>, u8)> = bags.iter().zip(labels).map(|(b, y)| (b.0.clone(), y)).collect();
        let (train, val) = partition(&permuted, 10 + rep);
        finals.push(train_split(&train, &val, 32, &cfg, rep as u32).unwrap().final_epoch.val_auroc);
    }
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    assert!((0.35..=0.65).contains(&mean), "permuted-label AUROCs {finals:?}");
}
