//! Networks that consume the selector's `K`-channel output.
//!
//! * [`Architecture::Msfbcnn`]: four parallel temporal convolutions, batch
//!   norm, a spatial convolution across channels, batch norm, square,
//!   average pooling, log, dropout and a dense classifier.
//! * [`Architecture::Mlp`]: flatten → dense → relu → dropout → dense, for
//!   per-channel feature vectors.
//! * [`Architecture::Decoder`]: a linear multi-channel FIR decoder for
//!   regression targets.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Padding, ParamStore, Pointwise, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels (`K` when fed by a selector).
    pub channels: usize,
    pub times: usize,
    pub temporal_filters: usize,
    pub spatial_filters: usize,
    pub classes: usize,
    pub dropout: f64,
    pub kernel_sizes: Vec<usize>,
    pub pool: usize,
    pub pool_stride: usize,
}

impl ModelConfig {
    /// Full-size network: `T = 1125`, 10 temporal and 10 spatial filters,
    /// 4 classes.
    pub fn full(channels: usize) -> Self {
        Self {
            channels,
            times: 1125,
            temporal_filters: 10,
            spatial_filters: 10,
            classes: 4,
            dropout: 0.5,
            kernel_sizes: vec![64, 40, 26, 16],
            pool: 75,
            pool_stride: 15,
        }
    }

    pub fn toy(channels: usize, times: usize, filters: usize, classes: usize) -> Self {
        Self {
            times,
            temporal_filters: filters,
            spatial_filters: filters,
            classes,
            ..Self::full(channels)
        }
    }

    pub fn pooled_len(&self) -> usize {
        (self.times - self.pool) / self.pool_stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("times", self.times),
            ("temporal_filters", self.temporal_filters),
            ("spatial_filters", self.spatial_filters),
            ("classes", self.classes),
            ("pool", self.pool),
            ("pool_stride", self.pool_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::InvalidConfig("kernel sizes must be positive".into()));
        }
        if self.times < self.pool {
            return Err(Error::InvalidConfig(format!(
                "times {} shorter than pooling window {}",
                self.times, self.pool
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub channels: usize,
    pub features: usize,
    /// Zero gives a purely linear classifier.
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub times: usize,
    pub lags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Architecture {
    Msfbcnn(ModelConfig),
    Mlp(MlpConfig),
    Decoder(DecoderConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Architecture,
    pub params: ParamStore,
    pub bn_stats: Vec<RunningStats>,
}

fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

pub fn build_msfbcnn<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Network> {
    cfg.validate()?;
    let (c, ft, fs) = (cfg.channels, cfg.temporal_filters, cfg.spatial_filters);
    let maps = cfg.kernel_sizes.len() * ft;
    let mut params = ParamStore::new();
    for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
        params.register(
            format!("timeconv{}.weight", i + 1),
            glorot(&[ft, 1, k], k, ft * k, rng),
        );
    }
    // One affine pair per temporal filter index, shared by the parallel
    // branches.
    params.register("bn1.gamma", Tensor::full(&[ft], 1.0));
    params.register("bn1.beta", Tensor::zeros(&[ft]));
    params.register(
        "spatial.weight",
        glorot(&[fs, c * maps], c * maps, fs, rng),
    );
    params.register("bn2.gamma", Tensor::full(&[fs], 1.0));
    params.register("bn2.beta", Tensor::zeros(&[fs]));
    let flat = fs * cfg.pooled_len();
    params.register(
        "dense.weight",
        glorot(&[cfg.classes, flat], flat, cfg.classes, rng),
    );
    params.register("dense.bias", Tensor::zeros(&[cfg.classes]));
    Ok(Network {
        arch: Architecture::Msfbcnn(cfg.clone()),
        params,
        bn_stats: vec![RunningStats::new(maps), RunningStats::new(fs)],
    })
}

pub fn build_mlp<R: Rng + ?Sized>(cfg: &MlpConfig, rng: &mut R) -> Result<Network> {
    if cfg.channels == 0 || cfg.features == 0 || cfg.classes == 0 {
        return Err(Error::InvalidConfig("mlp dims must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::InvalidConfig(format!("dropout {}", cfg.dropout)));
    }
    let din = cfg.channels * cfg.features;
    let mut params = ParamStore::new();
    if cfg.hidden > 0 {
        params.register("fc1.weight", glorot(&[cfg.hidden, din], din, cfg.hidden, rng));
        params.register("fc1.bias", Tensor::zeros(&[cfg.hidden]));
        params.register(
            "fc2.weight",
            glorot(&[cfg.classes, cfg.hidden], cfg.hidden, cfg.classes, rng),
        );
        params.register("fc2.bias", Tensor::zeros(&[cfg.classes]));
    } else {
        params.register("fc.weight", glorot(&[cfg.classes, din], din, cfg.classes, rng));
        params.register("fc.bias", Tensor::zeros(&[cfg.classes]));
    }
    Ok(Network {
        arch: Architecture::Mlp(cfg.clone()),
        params,
        bn_stats: Vec::new(),
    })
}

pub fn build_decoder<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Result<Network> {
    if cfg.channels == 0 || cfg.times == 0 || cfg.lags == 0 {
        return Err(Error::InvalidConfig("decoder dims must be positive".into()));
    }
    let mut params = ParamStore::new();
    params.register(
        "decoder.weight",
        glorot(&[1, cfg.channels, cfg.lags], cfg.channels * cfg.lags, cfg.lags, rng),
    );
    Ok(Network {
        arch: Architecture::Decoder(cfg.clone()),
        params,
        bn_stats: Vec::new(),
    })
}

pub fn build<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Network> {
    match arch {
        Architecture::Msfbcnn(c) => build_msfbcnn(c, rng),
        Architecture::Mlp(c) => build_mlp(c, rng),
        Architecture::Decoder(c) => build_decoder(c, rng),
    }
}

pub fn parameter_count(net: &Network) -> usize {
    net.params.numel()
}

/// Closed-form MSFBCNN size: temporal kernels, shared first batch-norm
/// pair, spatial filters, second batch-norm pair, dense weights and bias.
pub fn msfbcnn_parameter_formula(cfg: &ModelConfig) -> usize {
    let (c, ft, fs, nc) = (
        cfg.channels,
        cfg.temporal_filters,
        cfg.spatial_filters,
        cfg.classes,
    );
    let ksum: usize = cfg.kernel_sizes.iter().sum();
    ksum * ft + 2 * ft + cfg.kernel_sizes.len() * c * ft * fs + 2 * fs + fs * cfg.pooled_len() * nc + nc
}

impl Network {
    pub fn task(&self) -> Task {
        match &self.arch {
            Architecture::Msfbcnn(c) => Task::Classification { classes: c.classes },
            Architecture::Mlp(c) => Task::Classification { classes: c.classes },
            Architecture::Decoder(_) => Task::Regression,
        }
    }

    /// Expected `(channels, length)` of each input sample.
    pub fn input_dims(&self) -> (usize, usize) {
        match &self.arch {
            Architecture::Msfbcnn(c) => (c.channels, c.times),
            Architecture::Mlp(c) => (c.channels, c.features),
            Architecture::Decoder(c) => (c.channels, c.times),
        }
    }

    /// Forward pass of `z: [B×C×L]` using parameters bound by
    /// `self.params.bind(tape)`. Train mode updates batch-norm running
    /// statistics and samples dropout masks from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let zs = tape.value(z).shape().to_vec();
        let (c, l) = self.input_dims();
        if zs.len() != 3 || zs[1] != c || zs[2] != l {
            return Err(Error::shape(
                "model_forward",
                format!("expected [B×{c}×{l}], got {zs:?}"),
            ));
        }
        let bsz = zs[0];
        match &self.arch {
            Architecture::Msfbcnn(cfg) => {
                let cfg = cfg.clone();
                let nk = cfg.kernel_sizes.len();
                let per_chan = tape.reshape(z, &[bsz * c, 1, cfg.times])?;
                let branches = (0..nk)
                    .map(|i| tape.conv1d(per_chan, vars[i], 1, 1, Padding::Same))
                    .collect::<Result<Vec<_>>>()?;
                let cat = tape.concat(&branches)?;
                let bn1 = tape.batch_norm(cat, vars[nk], vars[nk + 1], &mut self.bn_stats[0], mode)?;
                let maps = nk * cfg.temporal_filters;
                let stacked = tape.reshape(bn1, &[bsz, c * maps, cfg.times])?;
                let spatial = tape.matmul(vars[nk + 2], stacked)?;
                let bn2 =
                    tape.batch_norm(spatial, vars[nk + 3], vars[nk + 4], &mut self.bn_stats[1], mode)?;
                let sq = tape.pointwise(bn2, Pointwise::Square);
                let pooled = tape.avg_pool1d(sq, cfg.pool, cfg.pool_stride)?;
                let logged = tape.pointwise(pooled, Pointwise::LogEps);
                let dropped = tape.dropout(logged, cfg.dropout, mode, rng)?;
                let flat = tape.reshape(dropped, &[bsz, cfg.spatial_filters * cfg.pooled_len()])?;
                tape.dense(flat, vars[nk + 5], vars[nk + 6])
            }
            Architecture::Mlp(cfg) => {
                let flat = tape.reshape(z, &[bsz, cfg.channels * cfg.features])?;
                if cfg.hidden > 0 {
                    let h = tape.dense(flat, vars[0], vars[1])?;
                    let h = tape.pointwise(h, Pointwise::Relu);
                    let h = tape.dropout(h, cfg.dropout, mode, rng)?;
                    tape.dense(h, vars[2], vars[3])
                } else {
                    tape.dense(flat, vars[0], vars[1])
                }
            }
            Architecture::Decoder(cfg) => {
                let y = tape.conv1d(z, vars[0], 1, 1, Padding::Same)?;
                tape.reshape(y, &[bsz, cfg.times])
            }
        }
    }

    /// Eval-mode output for a batch, without touching running statistics.
    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        let mut net = self.clone();
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let out = net.forward(&mut tape, &vars, zv, Mode::Eval, &mut crate::rng::seeded(0))?;
        Ok(tape.value(out).clone())
    }
}
