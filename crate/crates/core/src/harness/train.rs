//! Joint training of a selector layer and a network.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use crate::autodiff::{Mode, Tape, Tensor, Var};
use crate::baselines::spectral::{log_power, BandPowerFeatures};
use crate::data::{EpochDataset, Labels, Split};
use crate::error::{Error, Result};
use crate::models::{Network, Task};
use crate::par::Exec;
use crate::rng;
use crate::selector::{
    duplicate_penalty_var, mean_entropy, AnnealingSchedule, Sampling, SelectorLayer, SelectorMode,
};

/// Model inputs `[M][N][L]` with targets and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub n_samples: usize,
    pub n_channels: usize,
    pub len: usize,
    pub x: Vec<f64>,
    pub target: Labels,
    pub splits: Vec<Split>,
    pub truth_channels: Vec<usize>,
}

const MIN_STD: f64 = 1e-12;

impl TrainData {
    /// Raw epochs, `L = T`.
    pub fn raw(ds: &EpochDataset) -> Self {
        Self {
            n_samples: ds.n_samples,
            n_channels: ds.n_channels,
            len: ds.n_times,
            x: ds.samples.clone(),
            target: ds.labels.clone(),
            splits: ds.splits.clone(),
            truth_channels: ds.truth_channels.clone(),
        }
    }

    /// Log band powers per channel (`L = 9`), standardized per channel and
    /// band with train-split statistics.
    pub fn band_power(ds: &EpochDataset, exec: Exec) -> Result<Self> {
        let feats = BandPowerFeatures::compute(ds, exec)?;
        let nb = feats.n_bands;
        let mut x: Vec<f64> = feats.values.iter().map(|&p| log_power(p)).collect();
        let train = ds.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::InvalidInput("train split is empty".into()));
        }
        let width = ds.n_channels * nb;
        for j in 0..width {
            let vals: Vec<f64> = train.iter().map(|&i| x[i * width + j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            for i in 0..ds.n_samples {
                let v = &mut x[i * width + j];
                *v = if sd < MIN_STD { 0.0 } else { (*v - mean) / sd };
            }
        }
        Ok(Self {
            n_samples: ds.n_samples,
            n_channels: ds.n_channels,
            len: nb,
            x,
            target: ds.labels.clone(),
            splits: ds.splits.clone(),
            truth_channels: ds.truth_channels.clone(),
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_samples).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn task(&self) -> Task {
        match &self.target {
            Labels::Class { classes, .. } => Task::Classification { classes: *classes },
            Labels::Envelope(_) => Task::Regression,
        }
    }

    /// `[B×N×L]` inputs of the given samples.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let w = self.n_channels * self.len;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.x[i * w..(i + 1) * w]);
        }
        Tensor::new(&[idx.len(), self.n_channels, self.len], data).expect("batch shape")
    }

    pub fn labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        match &self.target {
            Labels::Class { labels, .. } => Ok(idx.iter().map(|&i| labels[i]).collect()),
            Labels::Envelope(_) => Err(Error::InvalidInput("regression data has no labels".into())),
        }
    }

    /// Concatenated regression targets (`T` values per sample).
    pub fn targets(&self, idx: &[usize]) -> Result<Vec<f64>> {
        match &self.target {
            Labels::Envelope(y) => {
                let t = y.len() / self.n_samples;
                Ok(idx.iter().flat_map(|&i| y[i * t..(i + 1) * t].iter().copied()).collect())
            }
            Labels::Class { .. } => Err(Error::InvalidInput("classification data has no targets".into())),
        }
    }

    /// Keep channels `idx` in order.
    pub fn select_channels(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&c| c >= self.n_channels) {
            return Err(Error::InvalidInput(format!("bad channel subset {idx:?}")));
        }
        let (l, w) = (self.len, self.n_channels * self.len);
        let mut x = Vec::with_capacity(self.n_samples * idx.len() * l);
        for i in 0..self.n_samples {
            for &c in idx {
                x.extend_from_slice(&self.x[i * w + c * l..i * w + (c + 1) * l]);
            }
        }
        let truth_channels = idx
            .iter()
            .enumerate()
            .filter(|(_, c)| self.truth_channels.contains(c))
            .map(|(j, _)| j)
            .collect();
        Ok(Self {
            n_channels: idx.len(),
            x,
            truth_channels,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Duplicate-penalty weight; 0 disables the penalty.
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Mean normalized selector entropy that starts validation monitoring.
    pub entropy_threshold: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 150,
            lambda: 0.1,
            beta_start: 10.0,
            beta_end: 0.1,
            tau_start: 3.0,
            tau_end: 1.1,
            entropy_threshold: 0.05,
            patience: 10,
            sampling: Sampling::PerBatch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.adam.learning_rate),
            ("adam_eps", self.adam.eps),
            ("beta_start", self.beta_start),
            ("beta_end", self.beta_end),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [("adam_beta1", self.adam.beta1), ("adam_beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        if !(self.entropy_threshold > 0.0 && self.entropy_threshold < 1.0) {
            return Err(Error::config(
                "entropy_threshold",
                format!("must be in (0, 1), got {}", self.entropy_threshold),
            ));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn beta_schedule(&self) -> Result<AnnealingSchedule> {
        AnnealingSchedule::new(self.beta_start, self.beta_end, self.max_epochs)
    }

    pub fn tau_schedule(&self) -> Result<AnnealingSchedule> {
        AnnealingSchedule::new(self.tau_start, self.tau_end, self.max_epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss (task + penalty) over the epoch's batches.
    pub loss: f64,
    pub penalty: f64,
    /// Mean normalized entropy of the selection neurons after the epoch;
    /// `NaN` without a selector.
    pub mean_entropy: f64,
    pub beta: f64,
    pub tau: f64,
    /// Set once validation monitoring is active.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    /// Frozen (deterministic) selector, if one was trained.
    pub selector: Option<SelectorLayer>,
    pub history: Vec<EpochRecord>,
    /// First epoch whose mean entropy fell below the threshold.
    pub converged_at: Option<usize>,
    /// Epoch whose state was kept (lowest validation loss).
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;

fn task_loss(tape: &mut Tape, out: Var, data: &TrainData, idx: &[usize]) -> Result<Var> {
    match data.task() {
        Task::Classification { .. } => tape.softmax_cross_entropy(out, &data.labels(idx)?),
        Task::Regression => tape.mse(out, &data.targets(idx)?),
    }
}

fn check_shapes(net: &Network, selector: Option<&SelectorLayer>, data: &TrainData) -> Result<()> {
    let width = match selector {
        Some(s) => {
            if s.n_channels() != data.n_channels {
                return Err(Error::shape(
                    "train_joint",
                    format!("selector over {} channels, data has {}", s.n_channels(), data.n_channels),
                ));
            }
            s.n_select()
        }
        None => data.n_channels,
    };
    if net.input_dims() != (width, data.len) {
        return Err(Error::shape(
            "train_joint",
            format!("network expects {:?}, inputs are ({width}, {})", net.input_dims(), data.len),
        ));
    }
    match (net.task(), data.task()) {
        (Task::Classification { classes: a }, Task::Classification { classes: b }) if a == b => Ok(()),
        (Task::Regression, Task::Regression) => Ok(()),
        (a, b) => Err(Error::InvalidInput(format!("network task {a:?} vs data task {b:?}"))),
    }
}

/// Minibatches of a shuffled order; a trailing single sample joins the
/// previous batch so batch statistics stay defined.
fn minibatches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// Train `net` (behind `selector`, if given) on the train split.
///
/// Per epoch: anneal `β` and `τ`, run shuffled minibatches with fresh
/// concrete samples and Adam updates of the network weights and `log α`.
/// Once the mean selector entropy drops below the threshold (immediately
/// when there is no selector), the validation loss is tracked and training
/// stops after `patience` epochs without improvement or at `max_epochs`.
/// The lowest-validation-loss state is returned with the selector frozen.
pub fn train_joint(
    mut net: Network,
    mut selector: Option<SelectorLayer>,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shapes(&net, selector.as_ref(), data)?;
    let train = data.indices(Split::Train);
    let val = data.indices(Split::Val);
    if train.len() < 2 || val.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need at least 2 train and 1 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let beta_s = cfg.beta_schedule()?;
    let tau_s = cfg.tau_schedule()?;
    let mut rng = rng::derive(cfg.seed, STREAM_TRAIN);

    let mut shapes: Vec<Vec<usize>> = net.params.iter().map(|p| p.value.shape().to_vec()).collect();
    if let Some(s) = &selector {
        shapes.push(s.log_alpha.shape().to_vec());
    }
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.adam, &shape_refs);

    let mut history = Vec::new();
    let mut converged_at = None;
    let mut best: Option<(f64, usize, Network, Option<SelectorLayer>)> = None;
    let mut since_best = 0;
    let mut order = train.clone();
    for epoch in 0..cfg.max_epochs {
        let beta = beta_s.value(epoch);
        let tau = tau_s.value(epoch);
        if let Some(s) = &mut selector {
            s.beta = beta;
            s.mode = SelectorMode::Stochastic;
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pen_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for (bi, idx) in minibatches(&order, cfg.batch_size).iter().enumerate() {
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape);
            let la = selector.as_ref().map(|s| tape.param(s.log_alpha.clone()));
            let x = tape.constant(data.batch(idx));
            let z = match (&selector, la) {
                (Some(s), Some(la)) => s.forward(&mut tape, la, x, cfg.sampling, &mut rng)?,
                _ => x,
            };
            let out = net.forward(&mut tape, &vars, z, Mode::Train, &mut rng)?;
            let task = task_loss(&mut tape, out, data, idx)?;
            let (total, pen) = match la {
                Some(la) if cfg.lambda > 0.0 => {
                    let p = tape.softmax_rows(la)?;
                    let pen = duplicate_penalty_var(&mut tape, p, cfg.lambda, tau)?;
                    (tape.add(task, pen)?, Some(pen))
                }
                _ => (task, None),
            };
            let total_v = tape.value(total).item();
            let pen_v = pen.map_or(0.0, |p| tape.value(p).item());
            if !total_v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "task loss {}, penalty {pen_v}, beta {beta}, max |log alpha| {}",
                        tape.value(task).item(),
                        selector
                            .as_ref()
                            .map_or(0.0, |s| s.log_alpha.data().iter().fold(0.0_f64, |m, v| m.max(v.abs())))
                    ),
                });
            }
            let grads = tape.backward(total)?;
            let mut g = net.params.collect_grads(&vars, &grads);
            if let (Some(s), Some(la)) = (&selector, la) {
                g.push(grads.get_or_zeros(la, s.log_alpha.shape()));
            }
            let mut params: Vec<&mut Tensor> = net.params.iter_mut().map(|p| &mut p.value).collect();
            if let Some(s) = &mut selector {
                params.push(&mut s.log_alpha);
            }
            adam.step(&mut params, &g)?;
            loss_sum += total_v;
            pen_sum += pen_v;
            n_batches += 1;
        }
        let entropy = selector.as_ref().map_or(f64::NAN, mean_entropy);
        if converged_at.is_none() && selector.is_some() && entropy < cfg.entropy_threshold {
            converged_at = Some(epoch);
        }
        let monitoring = selector.is_none() || converged_at.is_some();
        let mut val_loss = None;
        if monitoring {
            let frozen = selector.as_ref().map(|s| {
                let mut f = s.clone();
                f.freeze();
                f
            });
            let v = loss_on(&net, frozen.as_ref(), data, &val)?;
            val_loss = Some(v);
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, epoch, net.clone(), frozen));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / n_batches as f64,
            penalty: pen_sum / n_batches as f64,
            mean_entropy: entropy,
            beta,
            tau,
            val_loss,
        });
        if monitoring && since_best >= cfg.patience {
            break;
        }
    }
    let (net, selector, best_epoch) = match best {
        Some((_, e, n, s)) => (n, s, Some(e)),
        None => {
            if let Some(s) = &mut selector {
                s.freeze();
            }
            (net, selector, None)
        }
    };
    Ok(TrainOutcome {
        net,
        selector,
        history,
        converged_at,
        best_epoch,
    })
}

const EVAL_BATCH: usize = 256;

/// Eval-mode outputs for samples `idx`. A selector must be frozen.
pub fn predict(
    net: &Network,
    selector: Option<&SelectorLayer>,
    data: &TrainData,
    idx: &[usize],
) -> Result<Vec<Tensor>> {
    if selector.is_some_and(|s| s.mode != SelectorMode::Deterministic) {
        return Err(Error::InvalidInput("evaluation needs a frozen selector".into()));
    }
    let mut net = net.clone();
    let mut dummy = rng::seeded(0);
    idx.chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape);
            let x = tape.constant(data.batch(chunk));
            let z = match selector {
                Some(s) => {
                    let la = tape.constant(s.log_alpha.clone());
                    s.forward(&mut tape, la, x, Sampling::PerBatch, &mut dummy)?
                }
                None => x,
            };
            let out = net.forward(&mut tape, &vars, z, Mode::Eval, &mut dummy)?;
            Ok(tape.value(out).clone())
        })
        .collect()
}

/// Mean task loss over samples `idx` in eval mode.
pub fn loss_on(net: &Network, selector: Option<&SelectorLayer>, data: &TrainData, idx: &[usize]) -> Result<f64> {
    let outs = predict(net, selector, data, idx)?;
    let mut total = 0.0;
    for (chunk, out) in idx.chunks(EVAL_BATCH).zip(outs) {
        let mut tape = Tape::new();
        let o = tape.constant(out);
        let l = task_loss(&mut tape, o, data, chunk)?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Classification accuracy (argmax, ties to the lowest class) or, for
/// regression, the Pearson correlation of all outputs with the targets.
pub fn evaluate(net: &Network, selector: Option<&SelectorLayer>, data: &TrainData, split: Split) -> Result<f64> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::InvalidInput(format!("{split:?} split is empty")));
    }
    let outs = predict(net, selector, data, &idx)?;
    match data.task() {
        Task::Classification { .. } => {
            let labels = data.labels(&idx)?;
            let mut correct = 0;
            let mut i = 0;
            for out in &outs {
                let k = out.shape()[1];
                for row in out.data().chunks(k) {
                    let mut best = 0;
                    for c in 1..k {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    correct += usize::from(best == labels[i]);
                    i += 1;
                }
            }
            Ok(correct as f64 / idx.len() as f64)
        }
        Task::Regression => {
            let pred: Vec<f64> = outs.iter().flat_map(|o| o.data().iter().copied()).collect();
            Ok(pearson(&pred, &data.targets(&idx)?))
        }
    }
}
