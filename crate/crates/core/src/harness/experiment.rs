//! Multi-run experiment protocol: for every method and every `K`, select
//! channels, train the network on them `runs` times, evaluate on the test
//! split and aggregate.
//!
//! Artifacts written under the output directory:
//!
//! ```text
//! config.txt                      canonical config
//! report.json                     ExperimentReport
//! {method}/ranking.csv            baseline ranking with scores (mi, utility)
//! {method}_k{K}/ranking.csv       rank,channel,frequency over runs
//! {method}_k{K}/run{r}/curves.csv epoch,loss,penalty,mean_entropy,beta,tau
//! {method}_k{K}/run{r}/model.ckpt parameters, log alpha, schedules, bn stats
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Features, Method, ModelKind, Preset};
use super::stats::{mean_std, welch_ttest};
use super::train::{evaluate, train_joint, TrainData, TrainOutcome, STREAM_INIT};
use crate::autodiff::Tensor;
use crate::baselines::spectral::{BandPowerFeatures, N_BANDS};
use crate::baselines::utility::{classification_problem, envelope_problem};
use crate::baselines::{mi_forward_select, utility_backward_eliminate, ChannelRanking, IcaOptions};
use crate::data::{io, split, standardize, synth_envelope, synth_motor, EpochDataset, Split};
use crate::error::{Error, Result};
use crate::models::{build, checkpoint, Architecture, DecoderConfig, MlpConfig, ModelConfig, Task};
use crate::par::{self, Exec};
use crate::rng;
use crate::selector::{hard_selection, unique_count, SelectorLayer};

pub const STREAM_DATA: u64 = 10;
pub const STREAM_SPLIT: u64 = 11;
pub const STREAM_SELECTOR: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub selected: Vec<usize>,
    pub unique: usize,
    /// Test accuracy, or test correlation for regression.
    pub metric: f64,
    pub epochs: usize,
    pub converged_at: Option<usize>,
    pub best_epoch: Option<usize>,
    pub final_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: Method,
    pub k: usize,
    pub runs: Vec<RunReport>,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub unique_mean: f64,
    /// Times each channel was selected, duplicates included.
    pub frequency: Vec<usize>,
    /// All channels by descending frequency, lower index first on ties.
    pub ranking: Vec<usize>,
}

/// Welch test of the test metric between two methods at one `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: usize,
    pub a: Method,
    pub b: Method,
    /// `None` when a sample has no variance.
    pub t: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: String,
    pub metric: String,
    pub n_channels: usize,
    pub truth_channels: Vec<usize>,
    pub cells: Vec<CellReport>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, k: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.method == method && c.k == k)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join("report.json"))?)?)
    }
}

/// Dataset, network inputs and band powers shared by all runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: EpochDataset,
    pub inputs: TrainData,
    pub features: BandPowerFeatures,
}

/// Load or synthesize the dataset and assign the split (always re-drawn
/// from `data_seed`).
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<EpochDataset> {
    let seed = cfg.synth.seed;
    let ds = match &cfg.data_path {
        Some(p) => io::load(p)?,
        None => {
            let mut r = rng::derive(seed, STREAM_DATA);
            match cfg.preset {
                Preset::Motor => synth_motor(&cfg.synth, &mut r)?,
                Preset::Envelope => synth_envelope(&cfg.synth, &mut r)?,
            }
        }
    };
    split(&ds, &cfg.split, &mut rng::derive(seed, STREAM_SPLIT))
}

pub fn prepare(cfg: &ExperimentConfig, dataset: EpochDataset, exec: Exec) -> Result<Prepared> {
    if let Some(&k) = cfg.k.iter().find(|&&k| k > dataset.n_channels) {
        return Err(Error::config("k", format!("{k} exceeds {} channels", dataset.n_channels)));
    }
    let inputs = match cfg.features {
        Features::BandPower => TrainData::band_power(&dataset, exec)?,
        Features::Raw => TrainData::raw(&standardize(&dataset)?),
    };
    let features = BandPowerFeatures::compute(&dataset, exec)?;
    Ok(Prepared {
        dataset,
        inputs,
        features,
    })
}

/// Network for `k` input channels.
pub fn build_network(cfg: &ExperimentConfig, data: &TrainData, k: usize, seed: u64) -> Result<crate::models::Network> {
    let arch = match (cfg.model, data.task()) {
        (ModelKind::Mlp, Task::Classification { classes }) => Architecture::Mlp(MlpConfig {
            channels: k,
            features: data.len,
            hidden: cfg.hidden,
            classes,
            dropout: cfg.dropout,
        }),
        (ModelKind::Msfbcnn, Task::Classification { classes }) => Architecture::Msfbcnn(ModelConfig {
            dropout: cfg.dropout,
            ..ModelConfig::toy(k, data.len, cfg.filters, classes)
        }),
        (ModelKind::Decoder, Task::Regression) => Architecture::Decoder(DecoderConfig {
            channels: k,
            times: data.len,
            lags: cfg.lags,
        }),
        (model, task) => {
            return Err(Error::config("model", format!("{model:?} cannot handle {task:?} data")));
        }
    };
    build(&arch, &mut rng::derive(seed, STREAM_INIT))
}

/// Ranking of a non-learned method, long enough for every `K` of the sweep.
/// MI and utility are fitted on the train split only.
pub fn fixed_ranking(method: Method, prep: &Prepared, k_max: usize, exec: Exec) -> Result<ChannelRanking> {
    let ds = &prep.dataset;
    let train = ds.indices(Split::Train);
    match method {
        Method::Mi => {
            let labels = ds
                .class_labels()
                .ok_or_else(|| Error::config("methods", "mi needs class labels"))?;
            let blocks: Vec<_> = (0..ds.n_channels).map(|c| prep.features.log_block(c, &train)).collect();
            let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            mi_forward_select(&blocks, &y, k_max, &IcaOptions::default(), exec)
        }
        Method::Utility => {
            let problem = match (ds.class_labels(), ds.classes()) {
                (Some(labels), Some(classes)) => {
                    let all: Vec<usize> = (0..ds.n_channels).collect();
                    let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
                    classification_problem(&prep.features.log_design(&all, &train), &y, classes, N_BANDS)?
                }
                _ => envelope_problem(ds, &train)?,
            };
            utility_backward_eliminate(&problem, 1)
        }
        Method::Truth => {
            let mut t = ds.truth_channels.clone();
            if t.len() < k_max {
                return Err(Error::config(
                    "k",
                    format!("truth method has {} channels, K up to {k_max}", t.len()),
                ));
            }
            t.sort_unstable();
            let scores = vec![1.0; t.len()];
            ChannelRanking::new(t, scores)
        }
        Method::Gumbel | Method::GumbelReg => Err(Error::InvalidInput(format!("{method:?} is learned"))),
    }
}

/// Train one run: a selector with the network for learned methods, the
/// network alone on `fixed` channels otherwise.
pub fn run_once(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    method: Method,
    k: usize,
    seed: u64,
    fixed: Option<&[usize]>,
) -> Result<(Vec<usize>, TrainOutcome, f64)> {
    let data = &prep.inputs;
    let tc = cfg.train_config(method, seed);
    match fixed {
        None => {
            let net = build_network(cfg, data, k, seed)?;
            let sel = SelectorLayer::new(data.n_channels, k, &mut rng::derive(seed, STREAM_SELECTOR));
            let out = train_joint(net, Some(sel), data, &tc)?;
            let s = out.selector.as_ref().expect("selector trained");
            let metric = evaluate(&out.net, Some(s), data, Split::Test)?;
            Ok((hard_selection(s).0, out, metric))
        }
        Some(chans) => {
            let sub = data.select_channels(chans)?;
            let net = build_network(cfg, &sub, k, seed)?;
            let out = train_joint(net, None, &sub, &tc)?;
            let metric = evaluate(&out.net, None, &sub, Split::Test)?;
            Ok((chans.to_vec(), out, metric))
        }
    }
}

fn write_curves(path: &Path, out: &TrainOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "penalty", "mean_entropy", "beta", "tau"])?;
    for e in &out.history {
        w.write_record([
            e.epoch.to_string(),
            e.loss.to_string(),
            e.penalty.to_string(),
            e.mean_entropy.to_string(),
            e.beta.to_string(),
            e.tau.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Named tensors of a trained run.
pub fn checkpoint_tensors(out: &TrainOutcome, selected: &[usize]) -> Vec<(String, Tensor)> {
    let mut t: Vec<(String, Tensor)> = out
        .net
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (i, bn) in out.net.bn_stats.iter().enumerate() {
        let n = bn.mean.len();
        t.push((format!("bn{i}.running_mean"), Tensor::new(&[n], bn.mean.clone()).expect("shape")));
        t.push((format!("bn{i}.running_var"), Tensor::new(&[n], bn.var.clone()).expect("shape")));
    }
    if let Some(s) = &out.selector {
        t.push(("selector.log_alpha".into(), s.log_alpha.clone()));
    }
    let e = out.history.len();
    let col = |f: fn(&super::train::EpochRecord) -> f64| {
        Tensor::new(&[e], out.history.iter().map(f).collect()).expect("shape")
    };
    t.push(("schedule.beta".into(), col(|r| r.beta)));
    t.push(("schedule.tau".into(), col(|r| r.tau)));
    let sel: Vec<f64> = selected.iter().map(|&c| c as f64).collect();
    t.push(("selected".into(), Tensor::new(&[sel.len()], sel).expect("shape")));
    t
}

fn cell_dir(method: Method, k: usize) -> String {
    format!("{}_k{k}", method.name())
}

/// Per-channel selection counts and the channels ordered by them.
pub fn frequency_ranking(runs: &[RunReport], n_channels: usize) -> (Vec<usize>, Vec<usize>) {
    let mut freq = vec![0; n_channels];
    for r in runs {
        for &c in &r.selected {
            freq[c] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n_channels).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    (freq, order)
}

fn write_frequency_csv(path: &Path, freq: &[usize], order: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "channel", "frequency"])?;
    for (r, &c) in order.iter().enumerate() {
        w.write_record([(r + 1).to_string(), c.to_string(), freq[c].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Fold run reports into per-cell summaries and pairwise tests.
pub fn aggregate(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    runs: Vec<((Method, usize), RunReport)>,
) -> ExperimentReport {
    let n = prep.dataset.n_channels;
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &k in &cfg.k {
            let rs: Vec<RunReport> = runs
                .iter()
                .filter(|(key, _)| *key == (method, k))
                .map(|(_, r)| r.clone())
                .collect();
            let metrics: Vec<f64> = rs.iter().map(|r| r.metric).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            let unique_mean = rs.iter().map(|r| r.unique as f64).sum::<f64>() / rs.len() as f64;
            let (frequency, ranking) = frequency_ranking(&rs, n);
            cells.push(CellReport {
                method,
                k,
                runs: rs,
                metric_mean,
                metric_std,
                unique_mean,
                frequency,
                ranking,
            });
        }
    }
    let mut comparisons = Vec::new();
    for &k in &cfg.k {
        for (i, &a) in cfg.methods.iter().enumerate() {
            for &b in &cfg.methods[i + 1..] {
                let m = |meth| -> Vec<f64> {
                    cells
                        .iter()
                        .find(|c: &&CellReport| c.method == meth && c.k == k)
                        .map(|c| c.runs.iter().map(|r| r.metric).collect())
                        .unwrap_or_default()
                };
                let (t, p) = welch_ttest(&m(a), &m(b)).map_or((None, None), |(t, p)| (Some(t), Some(p)));
                comparisons.push(Comparison { k, a, b, t, p });
            }
        }
    }
    ExperimentReport {
        config: cfg.render(),
        metric: match prep.inputs.task() {
            Task::Classification { .. } => "accuracy".into(),
            Task::Regression => "correlation".into(),
        },
        n_channels: n,
        truth_channels: prep.dataset.truth_channels.clone(),
        cells,
        comparisons,
    }
}

/// Run seed of run `r`.
pub fn run_seed(cfg: &ExperimentConfig, r: usize) -> u64 {
    rng::mix(cfg.seed, r as u64)
}

/// Run the full protocol and write all artifacts under `out_dir`.
///
/// Runs are independent jobs executed through `exec`; each job is
/// single-threaded, so results do not depend on the executor.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, exec: Exec) -> Result<ExperimentReport> {
    cfg.validate()?;
    let prep = prepare(cfg, build_dataset(cfg)?, exec)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.render())?;
    let k_max = *cfg.k.iter().max().expect("k nonempty");
    let mut rankings = Vec::new();
    for &method in cfg.methods.iter().filter(|m| !m.is_learned()) {
        let ranking = fixed_ranking(method, &prep, k_max, exec)?;
        let dir = out_dir.join(method.name());
        fs::create_dir_all(&dir)?;
        ranking.save_csv(&dir.join("ranking.csv"))?;
        rankings.push((method, ranking));
    }
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for &k in &cfg.k {
            fs::create_dir_all(out_dir.join(cell_dir(method, k)))?;
            for r in 0..cfg.runs {
                jobs.push((method, k, r));
            }
        }
    }
    let results = par::try_map(exec, jobs, |(method, k, r)| {
        let seed = run_seed(cfg, r);
        let fixed = rankings.iter().find(|(m, _)| *m == method).map(|(_, rk)| rk.top(k));
        let (selected, out, metric) = run_once(cfg, &prep, method, k, seed, fixed)?;
        let dir = out_dir.join(cell_dir(method, k)).join(format!("run{r}"));
        fs::create_dir_all(&dir)?;
        write_curves(&dir.join("curves.csv"), &out)?;
        checkpoint::save(&dir.join("model.ckpt"), &checkpoint_tensors(&out, &selected))?;
        let report = RunReport {
            run: r,
            seed,
            unique: unique_count(&selected),
            selected,
            metric,
            epochs: out.epochs_run(),
            converged_at: out.converged_at,
            best_epoch: out.best_epoch,
            final_entropy: out.history.last().map(|e| e.mean_entropy).filter(|v| v.is_finite()),
        };
        Ok::<_, Error>(((method, k), report))
    })?;
    let report = aggregate(cfg, &prep, results);
    for cell in &report.cells {
        write_frequency_csv(
            &out_dir.join(cell_dir(cell.method, cell.k)).join("ranking.csv"),
            &cell.frequency,
            &cell.ranking,
        )?;
    }
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Plain-text table of a report.
pub fn summary(report: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>3} {:>8} {:>8} {:>7}  top channels",
        "method", "K", report.metric.get(..8).unwrap_or(&report.metric), "std", "unique"
    );
    for c in &report.cells {
        let top: Vec<String> = c.ranking.iter().take(c.k).map(ToString::to_string).collect();
        let _ = writeln!(
            s,
            "{:<12} {:>3} {:>8.4} {:>8.4} {:>7.2}  {}",
            c.method.name(),
            c.k,
            c.metric_mean,
            c.metric_std,
            c.unique_mean,
            top.join(",")
        );
    }
    if !report.truth_channels.is_empty() {
        let _ = writeln!(s, "truth channels: {:?}", report.truth_channels);
    }
    for cmp in &report.comparisons {
        let p = cmp.p.map_or("n/a".to_string(), |p| format!("{p:.4}"));
        let _ = writeln!(s, "K={} {} vs {}: p = {p}", cmp.k, cmp.a.name(), cmp.b.name());
    }
    s
}
