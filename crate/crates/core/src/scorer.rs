//! Multi-label verb scorer: a two-layer perceptron over the concatenation of
//! a verb feature and an object feature, `logits = W2 relu(W1 x + b1) + b2`.
//!
//! Gradients are derived by hand and verified against central finite
//! differences with [`gradient_check`].

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    d_v: usize,
    d_o: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Parameter-shaped gradient buffers.
pub type Gradients = ScorerParams;

impl ScorerParams {
    pub fn zeros(d_v: usize, d_o: usize, hidden: usize, n_verbs: usize) -> Self {
        Self {
            d_v,
            d_o,
            w1: Array2::zeros((hidden, d_v + d_o)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((n_verbs, hidden)),
            b2: Array1::zeros(n_verbs),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(d_v: usize, d_o: usize, hidden: usize, n_verbs: usize, seed: u64) -> Result<Self> {
        if d_v == 0 || d_o == 0 || hidden == 0 || n_verbs == 0 {
            return Err(Error::InvalidConfig(format!(
                "scorer dimensions must be positive (d_v={d_v}, d_o={d_o}, hidden={hidden}, n_verbs={n_verbs})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d_v, d_o, hidden, n_verbs);
        let a1 = 1.0 / ((d_v + d_o) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        let a2 = 1.0 / (hidden as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_v, self.d_o, self.hidden(), self.n_verbs())
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_o(&self) -> usize {
        self.d_o
    }

    pub fn input_dim(&self) -> usize {
        self.d_v + self.d_o
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn n_verbs(&self) -> usize {
        self.b2.len()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.d_v == other.d_v
            && self.d_o == other.d_o
            && self.w1.dim() == other.w1.dim()
            && self.w2.dim() == other.w2.dim()
    }

    /// All entries in flat order: W1, b1, W2, b2 (each row-major).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
    }

    fn coord_mut(&mut self, mut i: usize) -> &mut f64 {
        if i < self.w1.len() {
            return &mut self.w1.as_slice_mut().unwrap()[i];
        }
        i -= self.w1.len();
        if i < self.b1.len() {
            return &mut self.b1[i];
        }
        i -= self.b1.len();
        if i < self.w2.len() {
            return &mut self.w2.as_slice_mut().unwrap()[i];
        }
        i -= self.w2.len();
        &mut self.b2[i]
    }

    pub fn coord(&self, mut i: usize) -> f64 {
        if i < self.w1.len() {
            return self.w1.as_slice().unwrap()[i];
        }
        i -= self.w1.len();
        if i < self.b1.len() {
            return self.b1[i];
        }
        i -= self.b1.len();
        if i < self.w2.len() {
            return self.w2.as_slice().unwrap()[i];
        }
        self.b2[i - self.w2.len()]
    }

    pub fn set_coord(&mut self, i: usize, value: f64) {
        *self.coord_mut(i) = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    fn zip_mut_with(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        Zip::from(&mut self.w1).and(&other.w1).for_each(|a, &b| f(a, b));
        Zip::from(&mut self.b1).and(&other.b1).for_each(|a, &b| f(a, b));
        Zip::from(&mut self.w2).and(&other.w2).for_each(|a, &b| f(a, b));
        Zip::from(&mut self.b2).and(&other.b2).for_each(|a, &b| f(a, b));
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.zip_mut_with(other, |a, b| *a += scale * b);
    }

    pub fn scale(&mut self, factor: f64) {
        self.w1.mapv_inplace(|x| x * factor);
        self.b1.mapv_inplace(|x| x * factor);
        self.w2.mapv_inplace(|x| x * factor);
        self.b2.mapv_inplace(|x| x * factor);
    }
}

pub fn init_params(d_v: usize, d_o: usize, hidden: usize, n_verbs: usize, seed: u64) -> Result<ScorerParams> {
    ScorerParams::init(d_v, d_o, hidden, n_verbs, seed)
}

/// Activations cached by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
}

pub fn forward(params: &ScorerParams, features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardTape)> {
    if features.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "feature width {} but scorer expects {}",
            features.ncols(),
            params.input_dim()
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("scorer input".into()));
    }
    let input = features.to_owned();
    let pre = input.dot(&params.w1.t()) + &params.b1;
    let hidden = pre.mapv(|z| z.max(0.0));
    let logits = hidden.dot(&params.w2.t()) + &params.b2;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("scorer logits".into()));
    }
    Ok((logits, ForwardTape { input, pre, hidden }))
}

/// Parameter gradients of `sum(upstream ⊙ logits)`.
pub fn backward(params: &ScorerParams, tape: &ForwardTape, upstream: ArrayView2<'_, f64>) -> Result<Gradients> {
    let rows = tape.input.nrows();
    if upstream.dim() != (rows, params.n_verbs()) || tape.pre.dim() != (rows, params.hidden()) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} for a tape of {rows} rows and {} verbs",
            upstream.dim(),
            params.n_verbs()
        )));
    }
    let w2 = upstream.t().dot(&tape.hidden);
    let b2 = upstream.sum_axis(Axis(0));
    let mut dpre = upstream.dot(&params.w2);
    Zip::from(&mut dpre).and(&tape.pre).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    let w1 = dpre.t().dot(&tape.input);
    let b1 = dpre.sum_axis(Axis(0));
    Ok(Gradients {
        d_v: params.d_v,
        d_o: params.d_o,
        w1,
        b1,
        w2,
        b2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: ScorerParams,
}

impl OptimState {
    /// Zero velocity shaped like `params`.
    pub fn new(params: &ScorerParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        })
    }
}

/// `velocity = momentum * velocity - lr * grad; params += velocity`.
/// Rejects non-finite gradients before touching any state.
pub fn sgd_step(params: &mut ScorerParams, grads: &Gradients, opt: &mut OptimState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&opt.velocity) {
        return Err(Error::Shape("gradient or velocity shape differs from parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    opt.velocity.zip_mut_with(grads, |v, g| *v = mu * *v - lr * g);
    params.add_scaled(&opt.velocity, 1.0);
    Ok(())
}

/// Nudges `b1` so no hidden pre-activation on `inputs` lies within `margin`
/// of the relu kink, so finite differences do not straddle it.
pub fn clear_relu_kinks(params: &mut ScorerParams, inputs: ArrayView2<'_, f64>, margin: f64) {
    let base = inputs.dot(&params.w1.t());
    for j in 0..params.hidden() {
        let col = base.column(j);
        let clear = |shift: f64| col.iter().all(|&z| (z + shift).abs() >= margin);
        let b = params.b1[j];
        if clear(b) {
            continue;
        }
        for step in 1..10_000 {
            let delta = margin * step as f64;
            if clear(b + delta) {
                params.b1[j] = b + delta;
                break;
            }
            if clear(b - delta) {
                params.b1[j] = b - delta;
                break;
            }
        }
    }
}

/// A loss evaluation that central differences are taken between.
/// Implementors may keep more than a rounded total so that `minus` stays
/// accurate when the two evaluations nearly cancel.
pub trait LossValue {
    /// `self - earlier`.
    fn minus(&self, earlier: &Self) -> f64;
}

impl LossValue for f64 {
    fn minus(&self, earlier: &Self) -> f64 {
        self - earlier
    }
}

/// Maximum relative error `|a - n| / max(1e-12, |a| + |n|)` between analytic
/// and central-difference gradients over `n_coords` sampled coordinates (all
/// of them when the model is smaller).
pub fn gradient_check<V, F>(params: &ScorerParams, n_coords: usize, step: f64, seed: u64, mut loss_fn: F) -> Result<f64>
where
    V: LossValue,
    F: FnMut(&ScorerParams) -> Result<(V, Gradients)>,
{
    let (_, analytic) = loss_fn(params)?;
    let total = params.num_params();
    let coords: Vec<usize> = if n_coords >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = index::sample(&mut rng, total, n_coords).into_vec();
        c.sort_unstable();
        c
    };
    let analytic: Vec<f64> = analytic.values().collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in coords {
        let x = params.coord(i);
        probe.set_coord(i, x + step);
        let (plus, _) = loss_fn(&probe)?;
        probe.set_coord(i, x - step);
        let (minus, _) = loss_fn(&probe)?;
        probe.set_coord(i, x);
        let numeric = plus.minus(&minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_params(buf: &mut Vec<u8>, p: &ScorerParams) {
    for x in p.values() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Binary checkpoint: magic, `u32` version, `u32` d_v, d_o, hidden,
/// n_verbs, then W1, b1, W2, b2 as row-major `f64`, then learning rate,
/// momentum and the four velocity buffers. All little-endian.
pub fn encode_checkpoint(params: &ScorerParams, opt: &OptimState) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 16 * (params.num_params() + 1));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    put_u32(&mut buf, params.d_v);
    put_u32(&mut buf, params.d_o);
    put_u32(&mut buf, params.hidden());
    put_u32(&mut buf, params.n_verbs());
    put_params(&mut buf, params);
    buf.extend_from_slice(&opt.learning_rate.to_le_bytes());
    buf.extend_from_slice(&opt.momentum.to_le_bytes());
    put_params(&mut buf, &opt.velocity);
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ScorerParams, OptimState)> {
    let corrupt = |m: &str| Error::Corrupt(format!("checkpoint: {m}"));
    if bytes.len() < 24 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic or header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    if word(0) != CHECKPOINT_VERSION as usize {
        return Err(corrupt("unsupported version"));
    }
    let (d_v, d_o, hidden, n_verbs) = (word(1), word(2), word(3), word(4));
    if d_v == 0 || d_o == 0 || hidden == 0 || n_verbs == 0 {
        return Err(corrupt("zero dimension"));
    }
    let mut params = ScorerParams::zeros(d_v, d_o, hidden, n_verbs);
    let n = params.num_params();
    if bytes.len() != 24 + 8 * (2 * n + 2) {
        return Err(corrupt("payload length does not match header"));
    }
    let f = |k: usize| f64::from_le_bytes(bytes[24 + 8 * k..32 + 8 * k].try_into().unwrap());
    for i in 0..n {
        params.set_coord(i, f(i));
    }
    let mut velocity = params.zeros_like();
    for i in 0..n {
        velocity.set_coord(i, f(n + 2 + i));
    }
    let opt = OptimState {
        learning_rate: f(n),
        momentum: f(n + 1),
        velocity,
    };
    Ok((params, opt))
}

pub fn write_checkpoint(path: &Path, params: &ScorerParams, opt: &OptimState) -> Result<()> {
    fs::write(path, encode_checkpoint(params, opt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ScorerParams, OptimState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
    }

    /// Loss `sum(upstream ⊙ logits)` whose parameter gradient is exactly
    /// what `backward` computes for the given upstream.
    fn linear_probe(params: &ScorerParams, x: &Array2<f64>, upstream: &Array2<f64>) -> Result<(f64, Gradients)> {
        let (logits, tape) = forward(params, x.view())?;
        let loss = (&logits * upstream).sum();
        Ok((loss, backward(params, &tape, upstream.view())?))
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = ScorerParams::init(3, 4, 5, 2, 17).unwrap();
        assert_eq!(a, ScorerParams::init(3, 4, 5, 2, 17).unwrap());
        assert_ne!(a, ScorerParams::init(3, 4, 5, 2, 18).unwrap());
        assert!(a.b1.iter().chain(a.b2.iter()).all(|&b| b == 0.0));
        let bound = 1.0 / 7f64.sqrt();
        assert!(a.w1.iter().all(|w| w.abs() < bound));
        assert!(ScorerParams::init(0, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn minimal_param_count() {
        let p = ScorerParams::init(3, 2, 1, 1, 0).unwrap();
        assert_eq!(p.num_params(), (3 + 2) + 1 + 1 + 1);
    }

    #[test]
    fn w1_spread_matches_uniform_moments() {
        // 400 hidden x 250 inputs = 10^5 entries; uniform(-a, a) has sd a / sqrt(3).
        let p = ScorerParams::init(125, 125, 400, 1, 5).unwrap();
        let n = p.w1.len() as f64;
        let mean = p.w1.sum() / n;
        let var = p.w1.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let expected = (1.0 / 250f64.sqrt()) / 3f64.sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ScorerParams::zeros(2, 3, 4, 5);
        let (logits, _) = forward(&p, random_batch(6, 5, 1).view()).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn hand_evaluated_identity_scorer() {
        let mut p = ScorerParams::zeros(1, 1, 1, 1);
        p.w1 = array![[1.0, 0.0]];
        p.w2 = array![[1.0]];
        let (logits, _) = forward(&p, array![[2.0, 5.0]].view()).unwrap();
        assert_eq!(logits[[0, 0]], 2.0);
        // Negative pre-activation is clipped.
        let (logits, _) = forward(&p, array![[-2.0, 5.0]].view()).unwrap();
        assert_eq!(logits[[0, 0]], 0.0);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let p = ScorerParams::init(4, 3, 6, 5, 9).unwrap();
        let mut p = p;
        p.b1.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64 - 0.2);
        p.b2.iter_mut().enumerate().for_each(|(i, b)| *b = -0.05 * i as f64);
        let x = random_batch(7, 7, 2);
        let (logits, _) = forward(&p, x.view()).unwrap();
        for r in 0..7 {
            let mut h = [0.0; 6];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut z = p.b1[j];
                for i in 0..7 {
                    z += p.w1[[j, i]] * x[[r, i]];
                }
                *hj = if z > 0.0 { z } else { 0.0 };
            }
            for v in 0..5 {
                let mut z = p.b2[v];
                for (j, hj) in h.iter().enumerate() {
                    z += p.w2[[v, j]] * hj;
                }
                assert!((logits[[r, v]] - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = ScorerParams::zeros(2, 2, 3, 1);
        assert!(matches!(forward(&p, random_batch(2, 3, 0).view()), Err(Error::Shape(_))));
        let mut x = random_batch(2, 4, 0);
        x[[1, 2]] = f64::INFINITY;
        assert!(matches!(forward(&p, x.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = ScorerParams::init(3, 3, 8, 4, 3).unwrap();
        let x = random_batch(5, 6, 4);
        let (_, tape) = forward(&p, x.view()).unwrap();
        let g = backward(&p, &tape, Array2::zeros((5, 4)).view()).unwrap();
        assert!(g.values().all(|v| v == 0.0));
        assert!(backward(&p, &tape, Array2::zeros((4, 4)).view()).is_err());
    }

    #[test]
    fn one_by_one_chain_rule() {
        let mut p = ScorerParams::zeros(1, 1, 1, 1);
        p.w1 = array![[0.5, -0.25]];
        p.b1 = array![0.1];
        p.w2 = array![[3.0]];
        let x = array![[2.0, 1.0]];
        let (_, tape) = forward(&p, x.view()).unwrap();
        let pre = 0.5 * 2.0 - 0.25 * 1.0 + 0.1;
        let g = backward(&p, &tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.b2[0], 1.0);
        assert!((g.w2[[0, 0]] - pre).abs() < 1e-15);
        assert_eq!(g.b1[0], 3.0);
        assert_eq!(g.w1[[0, 0]], 3.0 * 2.0);
        assert_eq!(g.w1[[0, 1]], 3.0 * 1.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut p = ScorerParams::init(3, 4, 10, 6, seed).unwrap();
            let x = random_batch(9, 7, 100 + seed);
            let upstream = random_batch(9, 6, 200 + seed);
            clear_relu_kinks(&mut p, x.view(), 1e-4);
            let err = gradient_check(&p, 200, 1e-6, seed, |q| linear_probe(q, &x, &upstream)).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn quadratic_toy_gradient_check() {
        let p = ScorerParams::init(2, 2, 3, 2, 1).unwrap();
        let err = gradient_check(&p, 1000, 1e-6, 0, |q| {
            let loss = q.values().map(|x| 0.5 * x * x).sum::<f64>();
            Ok((loss, q.clone()))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn kink_clearing_keeps_pre_activations_away_from_zero() {
        let mut p = ScorerParams::init(2, 2, 16, 3, 4).unwrap();
        let mut x = random_batch(12, 4, 5);
        // Force an exact kink: row 0 times W1 row 0 plus b1 is zero.
        let z: f64 = (0..4).map(|i| p.w1[[0, i]] * x[[0, i]]).sum();
        p.b1[0] = -z;
        x[[0, 0]] += 0.0;
        clear_relu_kinks(&mut p, x.view(), 1e-3);
        let (_, tape) = forward(&p, x.view()).unwrap();
        assert!(tape.pre.iter().all(|z| z.abs() >= 1e-3 * 0.999));
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let mut p = ScorerParams::init(2, 1, 3, 2, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        for i in 0..g.num_params() {
            g.set_coord(i, 0.25 * i as f64 - 1.0);
        }
        let mut opt = OptimState::new(&p, 1.0, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        for i in 0..p.num_params() {
            assert_eq!(p.coord(i), before.coord(i) - g.coord(i));
        }
    }

    #[test]
    fn zero_gradient_decays_velocity_geometrically() {
        let mut p = ScorerParams::init(1, 1, 2, 1, 0).unwrap();
        let mut opt = OptimState::new(&p, 0.1, 0.5).unwrap();
        let zero = p.zeros_like();
        let start = p.clone();
        for _ in 0..5 {
            sgd_step(&mut p, &zero, &mut opt).unwrap();
        }
        assert_eq!(p, start);

        let mut g = p.zeros_like();
        g.b2[0] = 1.0;
        sgd_step(&mut p, &g, &mut opt).unwrap();
        let v0 = opt.velocity.b2[0];
        for k in 1..=4 {
            sgd_step(&mut p, &zero, &mut opt).unwrap();
            assert_eq!(opt.velocity.b2[0], v0 * 0.5f64.powi(k));
        }
    }

    #[test]
    fn two_momentum_steps_match_closed_form() {
        let mut p = ScorerParams::init(2, 2, 3, 2, 8).unwrap();
        let p0 = p.clone();
        let mut g1 = p.zeros_like();
        let mut g2 = p.zeros_like();
        for i in 0..p.num_params() {
            g1.set_coord(i, (i as f64 * 0.37).sin());
            g2.set_coord(i, (i as f64 * 0.11).cos());
        }
        let (lr, mu) = (0.01, 0.9);
        let mut opt = OptimState::new(&p, lr, mu).unwrap();
        sgd_step(&mut p, &g1, &mut opt).unwrap();
        sgd_step(&mut p, &g2, &mut opt).unwrap();
        for i in 0..p.num_params() {
            let expected = p0.coord(i) - lr * (1.0 + mu) * g1.coord(i) - lr * g2.coord(i);
            assert!((p.coord(i) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = ScorerParams::init(1, 1, 2, 1, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.b1[1] = f64::NAN;
        let mut opt = OptimState::new(&p, 0.1, 0.9).unwrap();
        assert!(matches!(sgd_step(&mut p, &g, &mut opt), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert!(OptimState::new(&p, 0.0, 0.0).is_err());
        assert!(OptimState::new(&p, 0.1, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ScorerParams::init(3, 2, 4, 5, 6).unwrap();
        let mut opt = OptimState::new(&p, 0.01, 0.9).unwrap();
        opt.velocity.w2[[1, 2]] = -1.0 / 3.0;
        let bytes = encode_checkpoint(&p, &opt);
        assert_eq!(bytes.len(), 24 + 8 * (2 * p.num_params() + 2));
        let (p2, opt2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p2, p);
        assert_eq!(opt2, opt);
        assert_eq!(encode_checkpoint(&p2, &opt2), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn logits_scale_with_output_layer(seed in 0u64..1000, c in 0.01f64..50.0) {
            let p = ScorerParams::init(3, 2, 5, 4, seed).unwrap();
            let x = random_batch(4, 5, seed + 1);
            let (base, _) = forward(&p, x.view()).unwrap();
            let mut q = p.clone();
            q.w2.mapv_inplace(|w| w * c);
            q.b2.mapv_inplace(|b| b * c);
            let (scaled, _) = forward(&q, x.view()).unwrap();
            for (a, b) in base.iter().zip(scaled.iter()) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
