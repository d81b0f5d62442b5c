//! Concrete (Gumbel-softmax) channel selector.
//!
//! A layer of `K` selection neurons over `N` input channels. Neuron `k`
//! holds positive weights `α_{·k}` (stored as `log α`). In stochastic mode
//! each forward pass draws Gumbel noise `G` and mixes the input rows with
//!
//! ```text
//! w_{nk} = softmax_n((log α_{nk} + G_{nk}) / β)
//! ```
//!
//! so output row `k` is `Σ_n w_{nk} x_n`. In deterministic mode neuron `k`
//! copies input row `argmax_n α_{nk}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Pointwise, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng;

/// Uniform draws are clamped to `(ε, 1-ε)` before the double log.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectorMode {
    Stochastic,
    Deterministic,
}

/// How many Gumbel draws a training batch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sampling {
    /// One weight matrix shared by the whole batch.
    #[default]
    PerBatch,
    /// A fresh weight matrix for every sample.
    PerSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorLayer {
    /// `N×K`; `α = exp(log_alpha)`.
    pub log_alpha: Tensor,
    pub beta: f64,
    pub mode: SelectorMode,
}

impl SelectorLayer {
    /// Near-uniform start: `log α ~ U(-0.01, 0.01)`.
    pub fn new<R: Rng + ?Sized>(n_channels: usize, n_select: usize, rng: &mut R) -> Self {
        let log_alpha = Tensor::from_fn(&[n_channels, n_select], |_| rng.gen_range(-0.01..0.01));
        Self {
            log_alpha,
            beta: 1.0,
            mode: SelectorMode::Stochastic,
        }
    }

    pub fn from_log_alpha(log_alpha: Tensor, beta: f64) -> Result<Self> {
        if log_alpha.ndim() != 2 {
            return Err(Error::shape(
                "selector",
                format!("log_alpha must be N×K, got {:?}", log_alpha.shape()),
            ));
        }
        Ok(Self {
            log_alpha,
            beta,
            mode: SelectorMode::Stochastic,
        })
    }

    /// Build from positive weights `α` (`N×K`).
    pub fn from_alpha(alpha: &Tensor, beta: f64) -> Result<Self> {
        if alpha.data().iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidInput("alpha must be strictly positive".into()));
        }
        Self::from_log_alpha(alpha.map(f64::ln), beta)
    }

    pub fn n_channels(&self) -> usize {
        self.log_alpha.shape()[0]
    }

    pub fn n_select(&self) -> usize {
        self.log_alpha.shape()[1]
    }

    pub fn alpha(&self) -> Tensor {
        self.log_alpha.map(f64::exp)
    }

    pub fn freeze(&mut self) {
        self.mode = SelectorMode::Deterministic;
    }

    /// Apply the layer to `x: [B×N×F]` on `tape`, giving `[B×K×F]`.
    ///
    /// `log_alpha` must be the tape leaf bound to `self.log_alpha`. Only the
    /// stochastic path is differentiable with respect to it.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        log_alpha: Var,
        x: Var,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 3 || xs[1] != self.n_channels() {
            return Err(Error::shape(
                "selector_forward",
                format!("expected [B×{}×F], got {xs:?}", self.n_channels()),
            ));
        }
        match self.mode {
            SelectorMode::Deterministic => {
                let (idx, _) = hard_selection(self);
                let w = tape.constant(one_hot_columns(self.n_channels(), &idx));
                tape.matmul_tn(w, x)
            }
            SelectorMode::Stochastic => {
                let (n, k) = (self.n_channels(), self.n_select());
                let noise = match sampling {
                    Sampling::PerBatch => sample_gumbel(&[n, k], rng),
                    Sampling::PerSample => sample_gumbel(&[xs[0], n, k], rng),
                };
                let w = concrete_weights_var(tape, log_alpha, &noise, self.beta)?;
                tape.matmul_tn(w, x)
            }
        }
    }
}

/// Gumbel(0, 1) quantile of a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| gumbel_from_uniform(rng.gen::<f64>()))
}

/// Concrete sample for the given noise, without recording a tape.
pub fn concrete_weights_with_noise(log_alpha: &Tensor, noise: &Tensor, beta: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let la = tape.constant(log_alpha.clone());
    let w = concrete_weights_var(&mut tape, la, noise, beta)?;
    Ok(tape.value(w).clone())
}

/// Draw one `N×K` weight matrix from the layer's concrete distribution.
pub fn concrete_weights<R: Rng + ?Sized>(layer: &SelectorLayer, rng: &mut R) -> Result<Tensor> {
    let noise = sample_gumbel(layer.log_alpha.shape(), rng);
    concrete_weights_with_noise(&layer.log_alpha, &noise, layer.beta)
}

/// `softmax_n((log α + G)/β)` on the tape. `noise` is `N×K` or `B×N×K`.
pub fn concrete_weights_var(tape: &mut Tape, log_alpha: Var, noise: &Tensor, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::NonPositiveTemperature(beta));
    }
    let perturbed = tape.add_const(log_alpha, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / beta);
    tape.softmax_rows(scaled)
}

/// `p_{nk} = α_{nk} / Σ_j α_{jk}`.
pub fn selection_probabilities(layer: &SelectorLayer) -> Tensor {
    let (n, k) = (layer.n_channels(), layer.n_select());
    let mut p = layer.log_alpha.data().to_vec();
    crate::autodiff::softmax_cols(&mut p, n, k);
    Tensor::new(&[n, k], p).expect("same shape as log_alpha")
}

/// Differentiable `P` from the bound `log_alpha` leaf.
pub fn selection_probabilities_var(tape: &mut Tape, log_alpha: Var) -> Result<Var> {
    tape.softmax_rows(log_alpha)
}

/// Per-neuron argmax of `α` (lowest index on ties) and the number of
/// distinct channels picked.
pub fn hard_selection(layer: &SelectorLayer) -> (Vec<usize>, usize) {
    let (n, k) = (layer.n_channels(), layer.n_select());
    let idx: Vec<usize> = (0..k)
        .map(|c| {
            let mut best = 0;
            for r in 1..n {
                if layer.log_alpha.at2(r, c) > layer.log_alpha.at2(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect();
    let unique = unique_count(&idx);
    (idx, unique)
}

pub fn unique_count(idx: &[usize]) -> usize {
    let mut v = idx.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// `N×K` matrix whose column `k` is the indicator of channel `idx[k]`.
pub fn one_hot_columns(n: usize, idx: &[usize]) -> Tensor {
    let k = idx.len();
    Tensor::from_fn(&[n, k], |i| if idx[i % k] == i / k { 1.0 } else { 0.0 })
}

/// Entropy of a probability vector divided by `log N`, with `0·log 0 = 0`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    let n = p.len();
    if n < 2 {
        return 0.0;
    }
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    (h / (n as f64).ln()).clamp(0.0, 1.0)
}

/// Normalized entropy of every column of `P`.
pub fn column_entropies(p: &Tensor) -> Vec<f64> {
    let (n, k) = (p.shape()[0], p.shape()[1]);
    (0..k)
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|r| p.at2(r, c)).collect();
            normalized_entropy(&col)
        })
        .collect()
}

pub fn mean_entropy(layer: &SelectorLayer) -> f64 {
    let e = column_entropies(&selection_probabilities(layer));
    e.iter().sum::<f64>() / e.len() as f64
}

/// Geometric interpolation `start·(end/start)^(t/T)` over `T` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealingSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: usize,
}

impl AnnealingSchedule {
    pub fn new(start: f64, end: f64, total_epochs: usize) -> Result<Self> {
        if !(start > 0.0 && end > 0.0) || total_epochs == 0 {
            return Err(Error::InvalidConfig(format!(
                "schedule {start} -> {end} over {total_epochs} epochs"
            )));
        }
        Ok(Self {
            start,
            end,
            total_epochs,
        })
    }

    /// Value at epoch `t`; clamped to `end` for `t ≥ T`.
    pub fn value(&self, t: usize) -> f64 {
        if t == 0 {
            self.start
        } else if t >= self.total_epochs {
            self.end
        } else {
            let frac = t as f64 / self.total_epochs as f64;
            self.start * (self.end / self.start).powf(frac)
        }
    }
}

/// Weight `λ` and threshold schedule `τ(t)` of the duplicate penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub lambda: f64,
    pub tau_schedule: AnnealingSchedule,
}

/// `λ Σ_n relu(Σ_k p_{nk} - τ)` with `τ = tau_schedule(epoch)`.
pub fn duplicate_penalty(p: &Tensor, cfg: &RegularizationConfig, epoch: usize) -> f64 {
    if cfg.lambda == 0.0 {
        return 0.0;
    }
    let tau = cfg.tau_schedule.value(epoch);
    let k = p.shape()[1];
    cfg.lambda
        * p.data()
            .chunks(k)
            .map(|row| {
                let excess = row.iter().sum::<f64>() - tau;
                if excess < 0.0 { 0.0 } else { excess }
            })
            .sum::<f64>()
}

/// Differentiable penalty on `P = softmax_rows(log_alpha)`.
pub fn duplicate_penalty_var(tape: &mut Tape, p: Var, lambda: f64, tau: f64) -> Result<Var> {
    let rows = tape.sum_last_axis(p)?;
    let excess = tape.add_scalar(rows, -tau);
    let hinge = tape.pointwise(excess, Pointwise::Relu);
    let total = tape.sum(hinge);
    Ok(tape.scale(total, lambda))
}

/// Monte Carlo frequency with which each channel is the argmax of a
/// concrete draw, per neuron (`N×K`). Draws are split into independently
/// seeded chunks so the result is the same for either executor.
pub fn empirical_selection_frequencies(
    layer: &SelectorLayer,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<Tensor> {
    const CHUNK: usize = 1000;
    let (n, k) = (layer.n_channels(), layer.n_select());
    let chunks = draws.div_ceil(CHUNK);
    let partial = par::try_map_range(exec, chunks, |c| -> Result<Vec<usize>> {
        let mut rng = rng::derive(seed, c as u64);
        let mut counts = vec![0usize; n * k];
        let m = CHUNK.min(draws - c * CHUNK);
        for _ in 0..m {
            let w = concrete_weights(layer, &mut rng)?;
            for col in 0..k {
                let mut best = 0;
                for r in 1..n {
                    if w.at2(r, col) > w.at2(best, col) {
                        best = r;
                    }
                }
                counts[best * k + col] += 1;
            }
        }
        Ok(counts)
    })?;
    let mut total = vec![0.0; n * k];
    for counts in partial {
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c as f64;
        }
    }
    Tensor::new(&[n, k], total.into_iter().map(|c| c / draws as f64).collect())
}

/// Rows `idx` of every sample of `x: [B×N×F]`, giving `[B×K×F]`.
pub fn gather_channels(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if x.ndim() != 3 || idx.iter().any(|&i| i >= x.shape()[1]) {
        return Err(Error::shape(
            "gather_channels",
            format!("{:?} with indices {idx:?}", x.shape()),
        ));
    }
    let (b, n, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(b * idx.len() * f);
    for s in 0..b {
        for &i in idx {
            out.extend_from_slice(&x.data()[(s * n + i) * f..(s * n + i + 1) * f]);
        }
    }
    Tensor::new(&[b, idx.len(), f], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn layer_from_alpha(cols: &[&[f64]]) -> SelectorLayer {
        let k = cols.len();
        let n = cols[0].len();
        let alpha = Tensor::from_fn(&[n, k], |i| cols[i % k][i / k]);
        SelectorLayer::from_alpha(&alpha, 1.0).unwrap()
    }

    #[test]
    fn gumbel_quantiles() {
        assert_abs_diff_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            gumbel_from_uniform((-std::f64::consts::E).exp()),
            -1.0,
            epsilon = 1e-12
        );
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut r = rng::seeded(5);
        let g = sample_gumbel(&[100_000], &mut r);
        let mean = g.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 0.577_215_664_9).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn equal_alpha_zero_noise_is_uniform() {
        let layer = layer_from_alpha(&[&[2.0; 5], &[2.0; 5]]);
        let w = concrete_weights_with_noise(&layer.log_alpha, &Tensor::zeros(&[5, 2]), 0.7).unwrap();
        for v in w.data() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let layer = layer_from_alpha(&[&[1.0, 2.0]]);
        let noise = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            concrete_weights_with_noise(&layer.log_alpha, &noise, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn probabilities_examples() {
        let layer = layer_from_alpha(&[&[1.0, 3.0]]);
        let p = selection_probabilities(&layer);
        assert_abs_diff_eq!(p.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.data()[1], 0.75, epsilon = 1e-15);
        let uniform = layer_from_alpha(&[&[0.3; 4], &[7.0; 4]]);
        for v in selection_probabilities(&uniform).data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn deterministic_forward_copies_rows() {
        let mut alpha = vec![vec![0.01; 6]; 2];
        alpha[0][2] = 1.0;
        alpha[1][5] = 1.0;
        let mut layer = layer_from_alpha(&[&alpha[0], &alpha[1]]);
        layer.freeze();
        let x = Tensor::from_fn(&[2, 6, 3], |i| i as f64 * 0.5 - 3.0);
        let mut tape = Tape::new();
        let la = tape.param(layer.log_alpha.clone());
        let xv = tape.constant(x.clone());
        let z = layer
            .forward(&mut tape, la, xv, Sampling::PerBatch, &mut rng::seeded(0))
            .unwrap();
        assert_eq!(tape.value(z), &gather_channels(&x, &[2, 5]).unwrap());
    }

    #[test]
    fn stochastic_forward_low_temperature_selects_rows() {
        let mut r = rng::seeded(3);
        let mut layer = SelectorLayer::new(5, 3, &mut r);
        layer.beta = 1e-7;
        let x = Tensor::from_fn(&[1, 5, 4], |i| (i as f64).sin());
        let mut tape = Tape::new();
        let la = tape.param(layer.log_alpha.clone());
        let xv = tape.constant(x.clone());
        let z = layer
            .forward(&mut tape, la, xv, Sampling::PerBatch, &mut r)
            .unwrap();
        let zv = tape.value(z);
        for k in 0..3 {
            let row = &zv.data()[k * 4..(k + 1) * 4];
            let hit = (0..5).any(|n| {
                row.iter()
                    .zip(&x.data()[n * 4..(n + 1) * 4])
                    .all(|(a, b)| (a - b).abs() < 1e-9)
            });
            assert!(hit, "row {k} is not a copy of an input row");
        }
    }

    #[test]
    fn forward_rejects_wrong_channel_count() {
        let mut r = rng::seeded(0);
        let layer = SelectorLayer::new(4, 2, &mut r);
        let mut tape = Tape::new();
        let la = tape.param(layer.log_alpha.clone());
        let x = tape.constant(Tensor::zeros(&[1, 3, 5]));
        assert!(matches!(
            layer.forward(&mut tape, la, x, Sampling::PerBatch, &mut r),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn penalty_examples() {
        let cfg = RegularizationConfig {
            lambda: 0.1,
            tau_schedule: AnnealingSchedule::new(1.1, 1.1, 1).unwrap(),
        };
        let distinct = one_hot_columns(5, &[0, 3, 4]);
        assert_eq!(duplicate_penalty(&distinct, &cfg, 0), 0.0);
        let dup = one_hot_columns(5, &[2, 2]);
        assert_abs_diff_eq!(duplicate_penalty(&dup, &cfg, 0), 0.09, epsilon = 1e-15);
        let uniform = Tensor::full(&[4, 2], 0.25);
        assert_eq!(duplicate_penalty(&uniform, &cfg, 0), 0.0);
        let off = RegularizationConfig { lambda: 0.0, ..cfg };
        assert_eq!(duplicate_penalty(&dup, &off, 0), 0.0);
    }

    #[test]
    fn penalty_var_matches_closed_form() {
        let mut r = rng::seeded(9);
        let layer = SelectorLayer::from_log_alpha(
            Tensor::from_fn(&[4, 6], |_| r.gen_range(-2.0..2.0)),
            1.0,
        )
        .unwrap();
        let cfg = RegularizationConfig {
            lambda: 0.3,
            tau_schedule: AnnealingSchedule::new(1.3, 1.3, 1).unwrap(),
        };
        let mut tape = Tape::new();
        let la = tape.param(layer.log_alpha.clone());
        let p = selection_probabilities_var(&mut tape, la).unwrap();
        let pen = duplicate_penalty_var(&mut tape, p, 0.3, 1.3).unwrap();
        let closed = duplicate_penalty(&selection_probabilities(&layer), &cfg, 0);
        assert_abs_diff_eq!(tape.value(pen).item(), closed, epsilon = 1e-12);
        assert!(closed > 0.0);
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(normalized_entropy(&[0.25; 4]), 1.0, epsilon = 1e-12);
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert_abs_diff_eq!(normalized_entropy(&[0.5, 0.5, 0.0, 0.0]), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = AnnealingSchedule::new(10.0, 0.1, 150).unwrap();
        assert_eq!(s.value(0), 10.0);
        assert_eq!(s.value(150), 0.1);
        assert_abs_diff_eq!(s.value(75), 1.0, epsilon = 1e-12);
        assert_eq!(s.value(400), 0.1);
        assert!(AnnealingSchedule::new(0.0, 1.0, 3).is_err());
        let flat = AnnealingSchedule::new(2.0, 2.0, 10).unwrap();
        assert_eq!(flat.value(5), 2.0);
    }

    #[test]
    fn hard_selection_ties_and_uniques() {
        let layer = layer_from_alpha(&[&[1.0, 1.0, 0.5], &[0.2, 3.0, 3.0]]);
        assert_eq!(hard_selection(&layer), (vec![0, 1], 2));
        let same = layer_from_alpha(&[&[0.1, 2.0, 0.3], &[0.1, 2.0, 0.3], &[0.1, 2.0, 0.3]]);
        assert_eq!(hard_selection(&same), (vec![1, 1, 1], 1));
    }

    proptest! {
        #[test]
        fn sampled_columns_are_stochastic(
            seed in 0u64..1000,
            n in 2usize..8,
            k in 1usize..6,
            beta in 0.01f64..20.0,
        ) {
            let mut r = rng::seeded(seed);
            let mut layer = SelectorLayer::new(n, k, &mut r);
            layer.log_alpha = Tensor::from_fn(&[n, k], |_| r.gen_range(-3.0..3.0));
            layer.beta = beta;
            let w = concrete_weights(&layer, &mut r).unwrap();
            let p = selection_probabilities(&layer);
            for c in 0..k {
                let ws: f64 = (0..n).map(|i| w.at2(i, c)).sum();
                let ps: f64 = (0..n).map(|i| p.at2(i, c)).sum();
                prop_assert!((ws - 1.0).abs() < 1e-9);
                prop_assert!((ps - 1.0).abs() < 1e-9);
            }
            for e in column_entropies(&p) {
                prop_assert!((0.0..=1.0).contains(&e));
            }
        }

        #[test]
        fn column_scaling_changes_nothing(seed in 0u64..1000, scale in 0.01f64..100.0, col in 0usize..3) {
            let mut r = rng::seeded(seed);
            let alpha = Tensor::from_fn(&[5, 3], |_| r.gen_range(0.1..5.0));
            let mut scaled = alpha.clone();
            for row in 0..5 {
                scaled.data_mut()[row * 3 + col] *= scale;
            }
            let a = SelectorLayer::from_alpha(&alpha, 1.0).unwrap();
            let b = SelectorLayer::from_alpha(&scaled, 1.0).unwrap();
            let (pa, pb) = (selection_probabilities(&a), selection_probabilities(&b));
            prop_assert!(pa.max_abs_diff(&pb) < 1e-12);
            prop_assert_eq!(hard_selection(&a), hard_selection(&b));
        }

        #[test]
        fn penalty_gating(seed in 0u64..1000, tau in 1.0f64..3.0) {
            let mut r = rng::seeded(seed);
            let layer = SelectorLayer::from_log_alpha(
                Tensor::from_fn(&[4, 5], |_| r.gen_range(-4.0..4.0)), 1.0).unwrap();
            let p = selection_probabilities(&layer);
            let cfg = RegularizationConfig {
                lambda: 0.1,
                tau_schedule: AnnealingSchedule::new(tau, tau, 1).unwrap(),
            };
            let max_row = p.data().chunks(5).map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
            let pen = duplicate_penalty(&p, &cfg, 0);
            if max_row <= tau {
                prop_assert_eq!(pen, 0.0);
            } else {
                prop_assert!(pen > 0.0);
            }
        }

        #[test]
        fn low_temperature_is_one_hot(seed in 0u64..500) {
            let mut r = rng::seeded(seed);
            let log_alpha = Tensor::from_fn(&[6, 3], |_| r.gen_range(-1.0..1.0));
            let noise = sample_gumbel(&[6, 3], &mut r);
            let w = concrete_weights_with_noise(&log_alpha, &noise, 1e-6).unwrap();
            for c in 0..3 {
                let best = (0..6)
                    .max_by(|&a, &b| {
                        let va = log_alpha.at2(a, c) + noise.at2(a, c);
                        let vb = log_alpha.at2(b, c) + noise.at2(b, c);
                        va.partial_cmp(&vb).unwrap()
                    })
                    .unwrap();
                for n in 0..6 {
                    let target = if n == best { 1.0 } else { 0.0 };
                    prop_assert!((w.at2(n, c) - target).abs() < 1e-9);
                }
            }
        }
    }
}
