use super::TilingError;

/// Between-class separation for threshold `t` (class 0 = bins `0..=t`), as the
/// exact integer pair `(d², n0·n1)` where `d = n1·S0 − n0·S1`. Between-class
/// variance equals `d² / (N² · n0 · n1)`. Returns `None` when a class is empty.
pub fn between_class_score(hist: &[u64; 256], t: usize) -> Option<(u128, u128)> {
    let (mut n0, mut s0, mut n1, mut s1) = (0u128, 0u128, 0u128, 0u128);
    for (i, &c) in hist.iter().enumerate() {
        let c = u128::from(c);
        if i <= t {
            n0 += c;
            s0 += c * i as u128;
        } else {
            n1 += c;
            s1 += c * i as u128;
        }
    }
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let d = (n1 * s0).abs_diff(n0 * s1);
    Some((d * d, n0 * n1))
}

/// `a.0 / a.1 > b.0 / b.1`, exact when the cross products fit in u128.
fn greater(a: (u128, u128), b: (u128, u128)) -> bool {
    match (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
        (Some(l), Some(r)) => l > r,
        _ => (a.0 as f64 / a.1 as f64) > (b.0 as f64 / b.1 as f64),
    }
}

/// Otsu threshold over a 256-bin histogram. Pixels `<= threshold` form the
/// darker class. Ties go to the lowest threshold.
///
/// Scores are compared exactly in integer arithmetic; histograms are limited
/// to 2^40 total counts so the squared separations fit in u128.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8, TilingError> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(TilingError::DegenerateHistogram);
    }
    let total_n: u128 = hist.iter().map(|&c| u128::from(c)).sum();
    if total_n > 1 << 40 {
        return Err(TilingError::Config(format!("histogram total {total_n} exceeds 2^40")));
    }
    let total_s: u128 = hist.iter().enumerate().map(|(i, &c)| u128::from(c) * i as u128).sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(usize, (u128, u128))> = None;
    for (t, &c) in hist.iter().enumerate().take(255) {
        n0 += u128::from(c);
        s0 += u128::from(c) * t as u128;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let d = (n1 * s0).abs_diff(n0 * s1);
        let score = (d * d, n0 * n1);
        if best.is_none_or(|(_, b)| greater(score, b)) {
            best = Some((t, score));
        }
    }
    // Two occupied bins guarantee at least one valid split.
    Ok(best.map(|(t, _)| t as u8).expect("non-degenerate histogram"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_valued_histogram_is_degenerate() {
        let mut h = [0u64; 256];
        h[77] = 1000;
        assert!(matches!(otsu_threshold(&h), Err(TilingError::DegenerateHistogram)));
        assert!(matches!(otsu_threshold(&[0; 256]), Err(TilingError::DegenerateHistogram)));
    }

    #[test]
    fn bimodal_ties_resolve_low() {
        let mut h = [0u64; 256];
        h[10] = 500;
        h[200] = 500;
        assert_eq!(otsu_threshold(&h).unwrap(), 10);
    }

    #[test]
    fn uniform_histogram_splits_in_the_middle() {
        assert_eq!(otsu_threshold(&[1; 256]).unwrap(), 127);
    }
}
