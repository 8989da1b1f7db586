//! Gated-attention pooling and its analytic gradients.
//!
//! For tile embeddings `h_k ∈ R^M`:
//!
//! ```text
//! s_k = wᵀ (tanh(V h_k) ⊙ σ(U h_k))      V, U: L×M, w: L
//! a   = softmax(s)
//! z   = Σ_k a_k h_k
//! p   = σ(W_c z + b)                      W_c: M, b: scalar
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GmaError;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmaParams {
    /// Embedding dimension.
    pub m: usize,
    /// Attention hidden dimension.
    pub l: usize,
    /// `L × M`, row-major.
    pub v: Vec<f64>,
    /// `L × M`, row-major.
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub wc: Vec<f64>,
    pub b: f64,
}

impl GmaParams {
    pub fn zeros(m: usize, l: usize) -> Self {
        GmaParams { m, l, v: vec![0.0; l * m], u: vec![0.0; l * m], w: vec![0.0; l], wc: vec![0.0; m], b: 0.0 }
    }

    /// Uniform in `±1/√fan_in` for every block (fan-in M for V, U, W_c and b; L for w).
    pub fn init<R: Rng>(m: usize, l: usize, rng: &mut R) -> Self {
        let mut p = GmaParams::zeros(m, l);
        let bm = 1.0 / (m as f64).sqrt();
        let bl = 1.0 / (l as f64).sqrt();
        for x in p.v.iter_mut().chain(p.u.iter_mut()) {
            *x = rng.random_range(-bm..=bm);
        }
        for x in p.w.iter_mut() {
            *x = rng.random_range(-bl..=bl);
        }
        for x in p.wc.iter_mut() {
            *x = rng.random_range(-bm..=bm);
        }
        p.b = rng.random_range(-bm..=bm);
        p
    }

    pub fn len(&self) -> usize {
        2 * self.l * self.m + self.l + self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened view in the order V, U, w, W_c, b.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.wc);
        out.push(self.b);
        out
    }

    pub fn from_flat(m: usize, l: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), 2 * l * m + l + m + 1, "flat parameter length");
        let (v, rest) = flat.split_at(l * m);
        let (u, rest) = rest.split_at(l * m);
        let (w, rest) = rest.split_at(l);
        let (wc, rest) = rest.split_at(m);
        GmaParams { m, l, v: v.to_vec(), u: u.to_vec(), w: w.to_vec(), wc: wc.to_vec(), b: rest[0] }
    }

    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.v.iter_mut().for_each(&mut f);
        self.u.iter_mut().for_each(&mut f);
        self.w.iter_mut().for_each(&mut f);
        self.wc.iter_mut().for_each(&mut f);
        f(&mut self.b);
    }

    /// Rounds every entry to the nearest `f32`, matching what the weights file stores.
    pub fn quantized(&self) -> Self {
        let mut q = self.clone();
        q.for_each_mut(|x| *x = f64::from(*x as f32));
        q
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probability: f64,
    pub logit: f64,
    pub attention: Vec<f64>,
    pub pooled: Vec<f64>,
    tanh_v: Vec<f64>,
    sig_u: Vec<f64>,
}

fn check_bag(params: &GmaParams, bag: &[f32]) -> Result<usize, GmaError> {
    if params.m == 0 || !bag.len().is_multiple_of(params.m) {
        return Err(GmaError::DimMismatch { expected: params.m, found_len: bag.len() });
    }
    let n = bag.len() / params.m;
    if n == 0 {
        return Err(GmaError::EmptyBag);
    }
    if bag.iter().any(|x| !x.is_finite()) {
        return Err(GmaError::NonFiniteBag);
    }
    Ok(n)
}

/// Runs the gated-attention head over a bag of `N × M` row-major embeddings.
pub fn forward_full(params: &GmaParams, bag: &[f32]) -> Result<Forward, GmaError> {
    let n = check_bag(params, bag)?;
    let (m, l) = (params.m, params.l);
    let mut tanh_v = vec![0f64; n * l];
    let mut sig_u = vec![0f64; n * l];
    let mut scores = vec![0f64; n];
    let mut h = vec![0f64; m];
    for k in 0..n {
        for (dst, &src) in h.iter_mut().zip(&bag[k * m..(k + 1) * m]) {
            *dst = f64::from(src);
        }
        let mut s = 0.0;
        for j in 0..l {
            let vrow = &params.v[j * m..(j + 1) * m];
            let urow = &params.u[j * m..(j + 1) * m];
            let (mut hv, mut hu) = (0.0, 0.0);
            for i in 0..m {
                hv += vrow[i] * h[i];
                hu += urow[i] * h[i];
            }
            let t = hv.tanh();
            let g = sigmoid(hu);
            tanh_v[k * l + j] = t;
            sig_u[k * l + j] = g;
            s += params.w[j] * t * g;
        }
        scores[k] = s;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut attention: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = attention.iter().sum();
    attention.iter_mut().for_each(|a| *a /= total);

    let mut pooled = vec![0f64; m];
    for (k, &a) in attention.iter().enumerate() {
        for (z, &x) in pooled.iter_mut().zip(&bag[k * m..(k + 1) * m]) {
            *z += a * f64::from(x);
        }
    }
    let logit = params.wc.iter().zip(&pooled).map(|(w, z)| w * z).sum::<f64>() + params.b;
    Ok(Forward { probability: sigmoid(logit), logit, attention, pooled, tanh_v, sig_u })
}

/// Slide probability and per-tile attention.
pub fn forward(params: &GmaParams, bag: &[f32]) -> Result<(f64, Vec<f64>), GmaError> {
    forward_full(params, bag).map(|f| (f.probability, f.attention))
}

pub fn bce(probability: f64, label: u8) -> f64 {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary cross-entropy and its gradient with respect to every parameter.
///
/// The logit gradient is `p − y`; the clamp only guards the logarithm.
pub fn loss_and_grads(params: &GmaParams, bag: &[f32], label: u8) -> Result<(f64, GmaParams), GmaError> {
    if label > 1 {
        return Err(GmaError::BadLabel(label));
    }
    let fwd = forward_full(params, bag)?;
    let (m, l) = (params.m, params.l);
    let n = fwd.attention.len();
    let loss = bce(fwd.probability, label);
    let dlogit = fwd.probability - f64::from(label);

    let mut g = GmaParams::zeros(m, l);
    g.b = dlogit;
    for (gw, z) in g.wc.iter_mut().zip(&fwd.pooled) {
        *gw = dlogit * z;
    }
    let dz: Vec<f64> = params.wc.iter().map(|w| dlogit * w).collect();

    let row = |k: usize| &bag[k * m..(k + 1) * m];
    let da: Vec<f64> = (0..n).map(|k| row(k).iter().zip(&dz).map(|(&x, d)| f64::from(x) * d).sum()).collect();
    let mean_da: f64 = fwd.attention.iter().zip(&da).map(|(a, d)| a * d).sum();

    for (k, (a, dak)) in fwd.attention.iter().zip(&da).enumerate() {
        let ds = a * (dak - mean_da);
        if ds == 0.0 {
            continue;
        }
        let h = row(k);
        for j in 0..l {
            let t = fwd.tanh_v[k * l + j];
            let s = fwd.sig_u[k * l + j];
            g.w[j] += ds * t * s;
            let dgate = ds * params.w[j];
            let dhv = dgate * s * (1.0 - t * t);
            let dhu = dgate * t * s * (1.0 - s);
            let gv = &mut g.v[j * m..(j + 1) * m];
            for (gvi, &x) in gv.iter_mut().zip(h) {
                *gvi += dhv * f64::from(x);
            }
            let gu = &mut g.u[j * m..(j + 1) * m];
            for (gui, &x) in gu.iter_mut().zip(h) {
                *gui += dhu * f64::from(x);
            }
        }
    }
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singleton_bag_has_unit_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GmaParams::init(4, 3, &mut rng);
        let (_, a) = forward(&p, &[0.1, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = GmaParams::init(3, 2, &mut rng);
        p.wc = vec![0.0; 3];
        p.b = 0.0;
        let bag: Vec<f32> = (0..12).map(|i| i as f32 * 0.7 - 3.0).collect();
        assert_eq!(forward(&p, &bag).unwrap().0, 0.5);
    }

    #[test]
    fn half_probability_positive_label_costs_ln2() {
        let p = GmaParams::zeros(2, 2);
        let (loss, _) = loss_and_grads(&p, &[1.0, 2.0], 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_v_kills_w_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = GmaParams::init(4, 3, &mut rng);
        p.v = vec![0.0; 12];
        let bag: Vec<f32> = (0..16).map(|i| (i as f32).sin()).collect();
        let (_, g) = loss_and_grads(&p, &bag, 1).unwrap();
        assert!(g.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nan_bag_is_rejected() {
        let p = GmaParams::zeros(2, 2);
        assert!(matches!(forward(&p, &[1.0, f32::NAN]), Err(GmaError::NonFiniteBag)));
        assert!(matches!(forward(&p, &[1.0, 2.0, 3.0]), Err(GmaError::DimMismatch { .. })));
        assert!(matches!(forward(&p, &[]), Err(GmaError::EmptyBag)));
    }

    #[test]
    fn loss_clamps_extreme_probabilities() {
        assert!((bce(0.0, 1) - (-(PROB_CLAMP).ln())).abs() < 1e-12);
        assert!(bce(1.0, 0).is_finite());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = GmaParams::init(5, 3, &mut rng);
        assert_eq!(GmaParams::from_flat(5, 3, &p.to_flat()), p);
        assert_eq!(p.len(), p.to_flat().len());
    }
}
