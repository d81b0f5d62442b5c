//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; every key may appear once.
//! `preset` picks the synthetic-data defaults, all other keys override
//! them.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `preset` | `motor` | `motor` (classification) or `envelope` (regression) |
//! | `channels`, `times`, `samples`, `fs`, `informative`, `classes`, `snr_db`, `modulation` | preset | synthetic data shape and signal |
//! | `data_seed` | `0` | seed for data generation and the split |
//! | `data_path` | none | EDS1 file to use instead of synthetic data |
//! | `split` | `0.8,0.1,0.1` | train/val/test fractions |
//! | `features` | `bandpower` (motor), `raw` (envelope) | network input per channel |
//! | `model` | `mlp` (motor), `decoder` (envelope) | `mlp`, `msfbcnn` or `decoder` |
//! | `hidden` | `0` | MLP hidden width (0: linear) |
//! | `dropout` | `0` | MLP / MSFBCNN dropout |
//! | `filters` | `4` | MSFBCNN temporal and spatial filters |
//! | `lags` | `5` | decoder FIR length |
//! | `learning_rate`, `adam_beta1`, `adam_beta2`, `adam_eps` | `0.001`, `0.9`, `0.999`, `1e-8` | Adam |
//! | `batch_size`, `max_epochs`, `patience` | `32`, `150`, `10` | training loop |
//! | `lambda` | `0.1` | duplicate penalty weight of `gumbel-reg` |
//! | `beta_start`, `beta_end`, `tau_start`, `tau_end` | `10`, `0.1`, `3`, `1.1` | annealing |
//! | `entropy_threshold` | `0.05` | entropy that starts early stopping |
//! | `sampling` | `per_batch` | `per_batch` or `per_sample` Gumbel noise |
//! | `methods` | `gumbel,gumbel-reg,mi,utility` | selectors to compare (`truth` also accepted) |
//! | `k` | `4` | comma-separated numbers of selected channels |
//! | `runs` | `10` | runs per method and `k` |
//! | `seed` | `0` | base seed of the runs |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use super::train::TrainConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::selector::Sampling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Motor,
    Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Features {
    BandPower,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Msfbcnn,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Concrete selector without the duplicate penalty.
    Gumbel,
    /// Concrete selector with the duplicate penalty.
    GumbelReg,
    /// Mutual-information forward selection.
    Mi,
    /// Least-squares utility backward elimination.
    Utility,
    /// The planted informative channels (synthetic data only).
    Truth,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gumbel,
        Method::GumbelReg,
        Method::Mi,
        Method::Utility,
        Method::Truth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gumbel => "gumbel",
            Method::GumbelReg => "gumbel-reg",
            Method::Mi => "mi",
            Method::Utility => "utility",
            Method::Truth => "truth",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Gumbel | Method::GumbelReg)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub synth: SynthConfig,
    pub data_path: Option<PathBuf>,
    pub split: Vec<f64>,
    pub features: Features,
    pub model: ModelKind,
    pub hidden: usize,
    pub dropout: f64,
    pub filters: usize,
    pub lags: usize,
    /// Training settings; `lambda` applies to `gumbel-reg` only.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub k: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (synth, features, model) = match preset {
            Preset::Motor => (SynthConfig::motor_preset(), Features::BandPower, ModelKind::Mlp),
            Preset::Envelope => (SynthConfig::envelope_preset(), Features::Raw, ModelKind::Decoder),
        };
        Self {
            preset,
            synth,
            data_path: None,
            split: vec![0.8, 0.1, 0.1],
            features,
            model,
            hidden: 0,
            dropout: 0.0,
            filters: 4,
            lags: 5,
            train: TrainConfig::default(),
            methods: vec![Method::Gumbel, Method::GumbelReg, Method::Mi, Method::Utility],
            k: vec![4],
            runs: 10,
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::config(key, "given more than once"));
            }
        }
        let preset = match entries.remove("preset").as_deref() {
            None | Some("motor") => Preset::Motor,
            Some("envelope") => Preset::Envelope,
            Some(other) => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        };
        let mut cfg = Self::preset(preset);
        for (key, value) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value.split(',').map(|v| num(key, v.trim())).collect()
        }
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "channels" => s.channels = num(key, value)?,
            "times" => s.times = num(key, value)?,
            "samples" => s.samples = num(key, value)?,
            "fs" => s.fs = num(key, value)?,
            "informative" => s.informative = num(key, value)?,
            "classes" => s.classes = num(key, value)?,
            "snr_db" => s.snr_db = num(key, value)?,
            "modulation" => s.modulation = num(key, value)?,
            "data_seed" => s.seed = num(key, value)?,
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "split" => self.split = list(key, value)?,
            "features" => {
                self.features = match value {
                    "bandpower" => Features::BandPower,
                    "raw" => Features::Raw,
                    _ => return Err(Error::config(key, format!("unknown features `{value}`"))),
                }
            }
            "model" => {
                self.model = match value {
                    "mlp" => ModelKind::Mlp,
                    "msfbcnn" => ModelKind::Msfbcnn,
                    "decoder" => ModelKind::Decoder,
                    _ => return Err(Error::config(key, format!("unknown model `{value}`"))),
                }
            }
            "hidden" => self.hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "filters" => self.filters = num(key, value)?,
            "lags" => self.lags = num(key, value)?,
            "learning_rate" => t.adam.learning_rate = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "lambda" => t.lambda = num(key, value)?,
            "beta_start" => t.beta_start = num(key, value)?,
            "beta_end" => t.beta_end = num(key, value)?,
            "tau_start" => t.tau_start = num(key, value)?,
            "tau_end" => t.tau_end = num(key, value)?,
            "entropy_threshold" => t.entropy_threshold = num(key, value)?,
            "sampling" => {
                t.sampling = match value {
                    "per_batch" => Sampling::PerBatch,
                    "per_sample" => Sampling::PerSample,
                    _ => return Err(Error::config(key, format!("unknown sampling `{value}`"))),
                }
            }
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|m| m.trim().parse().map_err(|e: String| Error::config(key, e)))
                    .collect::<Result<_>>()?
            }
            "k" => self.k = list(key, value)?,
            "runs" => self.runs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data_path.is_none() {
            self.synth
                .validate(self.preset == Preset::Motor)
                .map_err(|e| Error::config("preset", e.to_string()))?;
        }
        if self.split.len() != 3
            || self.split.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config("split", "need train, validation and test fractions summing to 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "empty"));
        }
        let mut seen = self.methods.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::config("methods", "duplicate method"));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::config("k", "need positive channel counts"));
        }
        if self.data_path.is_none() && self.k.iter().any(|&k| k > self.synth.channels) {
            return Err(Error::config("k", format!("exceeds {} channels", self.synth.channels)));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        match (self.model, self.features) {
            (ModelKind::Mlp, Features::Raw) => {
                return Err(Error::config("features", "the mlp model takes band-power features"))
            }
            (ModelKind::Msfbcnn | ModelKind::Decoder, Features::BandPower) => {
                return Err(Error::config("features", "msfbcnn and decoder take raw epochs"))
            }
            _ => {}
        }
        if self.filters == 0 {
            return Err(Error::config("filters", "must be positive"));
        }
        if self.lags == 0 {
            return Err(Error::config("lags", "must be positive"));
        }
        Ok(())
    }

    /// Training settings for a method and run seed.
    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: if method == Method::GumbelReg { self.train.lambda } else { 0.0 },
            seed,
            ..self.train.clone()
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = t.adam;
        let join = |v: &[String]| v.join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv(
            "preset",
            match self.preset {
                Preset::Motor => "motor",
                Preset::Envelope => "envelope",
            }
            .into(),
        );
        kv("channels", s.channels.to_string());
        kv("times", s.times.to_string());
        kv("samples", s.samples.to_string());
        kv("fs", format!("{:?}", s.fs));
        kv("informative", s.informative.to_string());
        kv("classes", s.classes.to_string());
        kv("snr_db", format!("{:?}", s.snr_db));
        kv("modulation", format!("{:?}", s.modulation));
        kv("data_seed", s.seed.to_string());
        if let Some(p) = &self.data_path {
            kv("data_path", p.display().to_string());
        }
        kv("split", join(&self.split.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()));
        kv(
            "features",
            match self.features {
                Features::BandPower => "bandpower",
                Features::Raw => "raw",
            }
            .into(),
        );
        kv(
            "model",
            match self.model {
                ModelKind::Mlp => "mlp",
                ModelKind::Msfbcnn => "msfbcnn",
                ModelKind::Decoder => "decoder",
            }
            .into(),
        );
        kv("hidden", self.hidden.to_string());
        kv("dropout", format!("{:?}", self.dropout));
        kv("filters", self.filters.to_string());
        kv("lags", self.lags.to_string());
        kv("learning_rate", format!("{learning_rate:?}"));
        kv("adam_beta1", format!("{beta1:?}"));
        kv("adam_beta2", format!("{beta2:?}"));
        kv("adam_eps", format!("{eps:?}"));
        kv("batch_size", t.batch_size.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("lambda", format!("{:?}", t.lambda));
        kv("beta_start", format!("{:?}", t.beta_start));
        kv("beta_end", format!("{:?}", t.beta_end));
        kv("tau_start", format!("{:?}", t.tau_start));
        kv("tau_end", format!("{:?}", t.tau_end));
        kv("entropy_threshold", format!("{:?}", t.entropy_threshold));
        kv(
            "sampling",
            match t.sampling {
                Sampling::PerBatch => "per_batch",
                Sampling::PerSample => "per_sample",
            }
            .into(),
        );
        kv("methods", join(&self.methods.iter().map(|m| m.name().to_string()).collect::<Vec<_>>()));
        kv("k", join(&self.k.iter().map(ToString::to_string).collect::<Vec<_>>()));
        kv("runs", self.runs.to_string());
        kv("seed", self.seed.to_string());
        out
    }
}
