//! Acceptance checks, one PASS/FAIL line each. Exits non-zero if any fails.

use std::time::Instant;

use chansel::autodiff::{GradCheckOptions, Tensor};
use chansel::baselines::spectral::BandPowerFeatures;
use chansel::baselines::{channel_utility, joint_mi, ls_fit, mi_forward_select, IcaOptions, LsProblem};
use chansel::data::{synth_motor, SynthConfig};
use chansel::harness::gradcheck::selector_stack_grad_check;
use chansel::harness::{run_experiment, ExperimentConfig, ExperimentReport, Method, TrainConfig};
use chansel::models::{build_msfbcnn, parameter_count, ModelConfig};
use chansel::par::Exec;
use chansel::rng;
use chansel::selector::{
    concrete_weights, duplicate_penalty, empirical_selection_frequencies, normalized_entropy, one_hot_columns,
    selection_probabilities, AnnealingSchedule, RegularizationConfig, SelectorLayer,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn parameter_counts() -> Outcome {
    let mut r = rng::seeded(0);
    let one = parameter_count(&build_msfbcnn(&ModelConfig::full(1), &mut r).map_err(|e| e.to_string())?);
    let fifty = parameter_count(&build_msfbcnn(&ModelConfig::full(50), &mut r).map_err(|e| e.to_string())?);
    check(one == 4744 && fifty == 24344, format!("C=1: {one}, C=50: {fifty}"))
}

fn gradient_integrity() -> Outcome {
    let rep = selector_stack_grad_check(&GradCheckOptions::default()).map_err(|e| e.to_string())?;
    check(
        rep.max_rel_error < 1e-4,
        format!("max relative error {:.2e} over {} coordinates", rep.max_rel_error, rep.coords_checked),
    )
}

fn concrete_limit() -> Outcome {
    let mut r = rng::seeded(1);
    let log_alpha = Tensor::from_fn(&[6, 3], |_| r.gen_range(-1.5..1.5));
    let mut cold = SelectorLayer::from_log_alpha(log_alpha.clone(), 1e-6).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w = concrete_weights(&cold, &mut r).map_err(|e| e.to_string())?;
        for col in 0..3 {
            let best = (0..6).max_by(|&a, &b| w.at2(a, col).total_cmp(&w.at2(b, col))).unwrap();
            for row in 0..6 {
                let target = if row == best { 1.0 } else { 0.0 };
                worst = worst.max((w.at2(row, col) - target).abs());
            }
        }
    }
    cold.beta = 0.1;
    let freq = empirical_selection_frequencies(&cold, 10_000, 2, Exec::Parallel).map_err(|e| e.to_string())?;
    let p = selection_probabilities(&cold);
    let dev = freq.max_abs_diff(&p);
    check(
        worst < 1e-9 && dev <= 0.02,
        format!("one-hot deviation at beta=1e-6: {worst:.1e}; max |freq - p| at beta=0.1: {dev:.4}"),
    )
}

fn annealing_endpoints() -> Outcome {
    let cfg = TrainConfig::default();
    let t = cfg.max_epochs;
    let beta = cfg.beta_schedule().map_err(|e| e.to_string())?;
    let tau = cfg.tau_schedule().map_err(|e| e.to_string())?;
    let v = [beta.value(0), beta.value(t), tau.value(0), tau.value(t)];
    let other = AnnealingSchedule::new(10.0, 0.1, 37).map_err(|e| e.to_string())?;
    check(
        v == [10.0, 0.1, 3.0, 1.1] && other.value(37) == 0.1,
        format!("beta(0)={} beta(T)={} tau(0)={} tau(T)={}", v[0], v[1], v[2], v[3]),
    )
}

fn regularizer_arithmetic() -> Outcome {
    let reg = RegularizationConfig {
        lambda: 0.1,
        tau_schedule: AnnealingSchedule::new(1.1, 1.1, 1).map_err(|e| e.to_string())?,
    };
    let dup = duplicate_penalty(&one_hot_columns(5, &[2, 2]), &reg, 0);
    let distinct = duplicate_penalty(&one_hot_columns(5, &[0, 3, 4]), &reg, 0);
    check(
        (dup - 0.09).abs() < 1e-12 && distinct == 0.0,
        format!("duplicate pair {dup:.12}, distinct {distinct}"),
    )
}

fn run(cfg_text: &str) -> Result<ExperimentReport, String> {
    let cfg = ExperimentConfig::parse(cfg_text).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_experiment(&cfg, dir.path(), Exec::Parallel).map_err(|e| e.to_string())
}

const LONG_TRAINING: &str = "samples = 1000\nmax_epochs = 600\nhidden = 0\nruns = 10\n";

fn duplicate_mitigation() -> Outcome {
    let report = run(&format!(
        "{LONG_TRAINING}channels = 10\nk = 5,6,7,8,9\nmethods = gumbel,gumbel-reg\n"
    ))?;
    let mut lines = Vec::new();
    let (mut never_worse, mut strictly_better, mut dup_seen) = (true, false, false);
    for k in 5..=9 {
        let plain = report.cell(Method::Gumbel, k).unwrap();
        let reg = report.cell(Method::GumbelReg, k).unwrap();
        never_worse &= reg.unique_mean >= plain.unique_mean;
        strictly_better |= reg.unique_mean > plain.unique_mean;
        if k <= 8 {
            dup_seen |= plain.runs.iter().any(|r| r.unique < k);
        }
        lines.push(format!("K={k} {:.1}/{:.1}", plain.unique_mean, reg.unique_mean));
    }
    check(
        never_worse && strictly_better && dup_seen,
        format!("mean unique without/with penalty: {}", lines.join(", ")),
    )
}

fn selection_recovery() -> Outcome {
    let report = run(&format!(
        "{LONG_TRAINING}channels = 16\ninformative = 4\nsnr_db = 10\nk = 4\nmethods = gumbel-reg,truth\n"
    ))?;
    let reg = report.cell(Method::GumbelReg, 4).unwrap();
    let truth = report.cell(Method::Truth, 4).unwrap();
    let hits = reg
        .runs
        .iter()
        .filter(|r| {
            let mut s = r.selected.clone();
            s.sort_unstable();
            s.dedup();
            s.iter().filter(|c| report.truth_channels.contains(c)).count() >= 3
        })
        .count();
    let gap = truth.metric_mean - reg.metric_mean;
    check(
        hits >= 8 && gap <= 0.05,
        format!(
            "{hits}/10 runs with >=3 truth channels; accuracy {:.3} vs truth-channel model {:.3}",
            reg.metric_mean, truth.metric_mean
        ),
    )
}

/// Regularized normal equations on the kept columns, solved by LU.
fn brute_cost(p: &LsProblem, cols: &[usize]) -> f64 {
    let n = cols.len();
    let r = DMatrix::from_fn(n, n, |i, j| p.rxx[(cols[i], cols[j])] + if i == j { p.delta } else { 0.0 });
    let b = DMatrix::from_fn(n, p.rxd.ncols(), |i, q| p.rxd[(cols[i], q)]);
    let w = r.clone().lu().solve(&b).unwrap();
    p.rdd - 2.0 * w.dot(&b) + w.dot(&(r * &w))
}

fn utility_oracle() -> Outcome {
    let mut r = rng::seeded(21);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.gen_range(2..=10);
        let m = n + r.gen_range(1..20);
        let x = DMatrix::from_fn(m, n, |_, _| gaussian(&mut r));
        let w_true = DVector::from_fn(n, |_, _| gaussian(&mut r));
        let y = &x * &w_true + DVector::from_fn(m, |_, _| 0.3 * gaussian(&mut r));
        let rxx = x.transpose() * &x / m as f64;
        let rxx = (&rxx + rxx.transpose()) * 0.5;
        let p = LsProblem::new(rxx, x.transpose() * &y / m as f64, y.norm_squared() / m as f64, m)
            .map_err(|e| e.to_string())?;
        let w = ls_fit(&p).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..n).collect();
        let base = brute_cost(&p, &all);
        for c in 0..n {
            let rest: Vec<usize> = all.iter().copied().filter(|&j| j != c).collect();
            let closed = channel_utility(&p, &w, c).map_err(|e| e.to_string())?;
            worst = worst.max((brute_cost(&p, &rest) - base - closed).abs());
        }
    }
    check(worst < 1e-8, format!("max |closed form - refit| {worst:.2e}"))
}

fn mi_sanity() -> Outcome {
    let mut r = rng::seeded(31);
    let opts = IcaOptions::default();
    let m = 2000;
    let labels: Vec<usize> = (0..m).map(|i| i % 2).collect();
    let noise = DMatrix::from_fn(m, 2, |_, _| gaussian(&mut r));
    let mi0 = joint_mi(&noise, &labels, &opts).map_err(|e| e.to_string())?;
    let copied = DMatrix::from_fn(m, 1, |i, _| labels[i] as f64 + 1e-3 * gaussian(&mut r));
    let mi1 = joint_mi(&copied, &labels, &opts).map_err(|e| e.to_string())?;
    let mut hits = 0;
    for seed in 0..10 {
        let cfg = SynthConfig {
            channels: 6,
            informative: 1,
            classes: 2,
            samples: 1000,
            ..SynthConfig::motor_preset()
        };
        let ds = synth_motor(&cfg, &mut rng::seeded(100 + seed)).map_err(|e| e.to_string())?;
        let feats = BandPowerFeatures::compute(&ds, Exec::Parallel).map_err(|e| e.to_string())?;
        let rows: Vec<usize> = (0..ds.n_samples).collect();
        let blocks: Vec<_> = (0..cfg.channels).map(|c| feats.log_block(c, &rows)).collect();
        let rank = mi_forward_select(&blocks, ds.class_labels().unwrap(), 1, &opts, Exec::Parallel)
            .map_err(|e| e.to_string())?;
        hits += usize::from(rank.indices[0] == ds.truth_channels[0]);
    }
    check(
        mi0.abs() <= 0.1 && (mi1 - 2f64.ln()).abs() <= 0.1 && hits >= 9,
        format!("independent {mi0:.4}, copied label {mi1:.4} (ln 2 = 0.6931), planted first {hits}/10"),
    )
}

fn entropy_measure() -> Outcome {
    let u = normalized_entropy(&[0.25; 4]);
    let o = normalized_entropy(&[0.0, 1.0, 0.0, 0.0]);
    let h = normalized_entropy(&[0.5, 0.5, 0.0, 0.0]);
    check(
        (u - 1.0).abs() < 1e-12 && o.abs() < 1e-12 && (h - 0.5).abs() < 1e-12,
        format!("uniform {u}, one-hot {o}, half-half {h}"),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::parse(
        "samples = 200\nchannels = 8\nk = 2,3\nruns = 2\nmax_epochs = 30\nmethods = gumbel,gumbel-reg,mi,utility\n",
    )
    .map_err(|e| e.to_string())?;
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, exec) in dirs.iter().zip([Exec::Parallel, Exec::Parallel, Exec::Sequential]) {
        run_experiment(&cfg, d.path(), exec).map_err(|e| e.to_string())?;
    }
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(d.path().join("report.json")).unwrap())
        .collect();
    check(
        bytes[0] == bytes[1] && bytes[0] == bytes[2],
        format!("{} bytes; rerun and sequential rerun identical", bytes[0].len()),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 11] = [
        ("parameter counts", parameter_counts),
        ("gradient integrity", gradient_integrity),
        ("concrete-distribution limit", concrete_limit),
        ("annealing endpoints", annealing_endpoints),
        ("regularizer arithmetic", regularizer_arithmetic),
        ("duplicate mitigation", duplicate_mitigation),
        ("selection recovery", selection_recovery),
        ("utility oracle", utility_oracle),
        ("MI sanity", mi_sanity),
        ("entropy measure", entropy_measure),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let t0 = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name}: {detail} [{:.1}s]", t0.elapsed().as_secs_f64());
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
