use chansel::baselines::spectral::{default_bands, BandPowerFeatures};
use chansel::baselines::utility::{classification_problem, envelope_problem};
use chansel::baselines::{
    band_power, channel_utility, fastica, ica_entropy, joint_mi, knn_entropy, ls_fit,
    mi_forward_select, utilities, utility_backward_eliminate, IcaOptions, LsProblem,
};
use chansel::data::{synth_motor, SynthConfig};
use chansel::par::Exec;
use chansel::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Independent oracle: solve the regularized normal equations on the kept
/// columns by LU and evaluate the regularized cost at the optimum.
fn brute_cost(p: &LsProblem, cols: &[usize]) -> f64 {
    let n = cols.len();
    let r = DMatrix::from_fn(n, n, |i, j| {
        p.rxx[(cols[i], cols[j])] + if i == j { p.delta } else { 0.0 }
    });
    let b = DMatrix::from_fn(n, p.rxd.ncols(), |i, q| p.rxd[(cols[i], q)]);
    let w = r.clone().lu().solve(&b).unwrap();
    p.rdd - 2.0 * w.dot(&b) + w.dot(&(r * &w))
}

fn random_problem(r: &mut rng::Rng, n: usize) -> LsProblem {
    let m = n + r.gen_range(1..20);
    let x = DMatrix::from_fn(m, n, |_, _| gaussian(r));
    let w_true = DVector::from_fn(n, |_, _| if r.gen_bool(0.3) { 0.0 } else { gaussian(r) });
    let y = &x * &w_true + DVector::from_fn(m, |_, _| 0.3 * gaussian(r));
    let rxx = x.transpose() * &x / m as f64;
    let rxx = (&rxx + rxx.transpose()) * 0.5;
    let rxd = x.transpose() * &y / m as f64;
    LsProblem::new(rxx, rxd, y.norm_squared() / m as f64, m).unwrap()
}

#[test]
fn white_noise_band_powers_are_flat() {
    let mut r = rng::seeded(1);
    let mut acc = [0.0; 9];
    for _ in 0..100 {
        let x: Vec<f64> = (0..500).map(|_| gaussian(&mut r)).collect();
        for (a, p) in acc.iter_mut().zip(band_power(&x, 250.0, &default_bands()).unwrap()) {
            *a += p;
        }
    }
    let mean = acc.iter().sum::<f64>() / 9.0;
    for a in acc {
        assert!((a / mean - 1.0).abs() < 0.2, "{acc:?}");
    }
}

#[test]
fn fastica_unmixes_rotated_uniform_sources() {
    let mut r = rng::seeded(2);
    let m = 10_000;
    let s = DMatrix::from_fn(m, 3, |_, _| r.gen_range(-1.0..1.0));
    // a random rotation followed by anisotropic scaling
    let q = DMatrix::from_fn(3, 3, |_, _| gaussian(&mut r)).qr().q();
    let mix = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 0.5])) * q;
    let x = &s * mix.transpose();
    let ica = fastica(&x, &IcaOptions::default()).unwrap();
    let y = ica.transform(&x);
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for src in s.column_iter() {
        let best = y
            .column_iter()
            .map(|c| corr(src.as_slice(), c.as_slice()).abs())
            .fold(0.0, f64::max);
        assert!(best > 0.95, "best |corr| {best}");
    }
    let cov = y.transpose() * &y / m as f64;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(cov[(i, j)].abs() < 1e-3);
            }
        }
    }
    let wwt = &ica.rotation * ica.rotation.transpose();
    assert!((wwt - DMatrix::identity(3, 3)).amax() < 1e-9);
    assert!(!ica.is_gaussian_like(0.1));
}

#[test]
fn fastica_flags_gaussian_data() {
    let mut r = rng::seeded(3);
    let x = DMatrix::from_fn(10_000, 2, |_, _| gaussian(&mut r));
    match fastica(&x, &IcaOptions::default()) {
        Ok(ica) => assert!(ica.is_gaussian_like(0.1), "kurtosis {}", ica.min_abs_kurtosis),
        Err(chansel::Error::NonConvergence { .. }) => {}
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn single_feature_entropy_matches_direct_estimator() {
    let mut r = rng::seeded(4);
    let x: Vec<f64> = (0..400).map(|_| 2.0 + 5.0 * gaussian(&mut r)).collect();
    let block = DMatrix::from_column_slice(400, 1, &x);
    let via_ica = ica_entropy(&block, &IcaOptions::default()).unwrap();
    assert!((via_ica - knn_entropy(&x).unwrap()).abs() < 1e-6);
}

#[test]
fn joint_mi_independence_and_copied_label() {
    let mut r = rng::seeded(5);
    let m = 2000;
    let labels: Vec<usize> = (0..m).map(|i| i % 2).collect();
    let noise = DMatrix::from_fn(m, 2, |_, _| gaussian(&mut r));
    let mi0 = joint_mi(&noise, &labels, &IcaOptions::default()).unwrap();
    assert!(mi0 < 0.1, "{mi0}");
    let copied = DMatrix::from_fn(m, 1, |i, _| labels[i] as f64 + 1e-3 * gaussian(&mut r));
    let mi1 = joint_mi(&copied, &labels, &IcaOptions::default()).unwrap();
    assert!((mi1 - 2f64.ln()).abs() < 0.1, "{mi1}");
}

fn motor_blocks(
    seed: u64,
    channels: usize,
    informative: usize,
    classes: usize,
    samples: usize,
) -> (Vec<DMatrix<f64>>, Vec<usize>, Vec<usize>) {
    let cfg = SynthConfig {
        channels,
        informative,
        classes,
        samples,
        snr_db: 10.0,
        ..SynthConfig::motor_preset()
    };
    let ds = synth_motor(&cfg, &mut rng::seeded(seed)).unwrap();
    let feats = BandPowerFeatures::compute(&ds, Exec::Sequential).unwrap();
    let rows: Vec<usize> = (0..ds.n_samples).collect();
    let blocks = (0..channels).map(|c| feats.log_block(c, &rows)).collect();
    (blocks, ds.class_labels().unwrap().to_vec(), ds.truth_channels.clone())
}

#[test]
fn mi_forward_select_finds_planted_channel() {
    let mut hits = 0;
    for seed in 0..10 {
        let (blocks, labels, truth) = motor_blocks(seed, 6, 1, 2, 1000);
        let r = mi_forward_select(&blocks, &labels, 1, &IcaOptions::default(), Exec::Parallel).unwrap();
        hits += usize::from(r.indices[0] == truth[0]);
    }
    assert!(hits >= 9, "{hits}/10");
}

#[test]
fn mi_forward_select_full_and_greedy_oracle() {
    let (blocks, labels, _) = motor_blocks(7, 5, 2, 4, 160);
    let blocks: Vec<DMatrix<f64>> = blocks.into_iter().map(|b| b.columns(0, 3).into_owned()).collect();
    let opts = IcaOptions::default();
    let all = mi_forward_select(&blocks, &labels, 5, &opts, Exec::Sequential).unwrap();
    let mut idx = all.indices.clone();
    idx.sort_unstable();
    assert_eq!(idx, vec![0, 1, 2, 3, 4]);

    // exhaustive search over singletons, then over pairs extending the best
    let stack = |chans: &[usize]| {
        let mut m = DMatrix::zeros(labels.len(), 3 * chans.len());
        for (j, &c) in chans.iter().enumerate() {
            m.columns_mut(3 * j, 3).copy_from(&blocks[c]);
        }
        m
    };
    let single: Vec<f64> = (0..5).map(|c| joint_mi(&stack(&[c]), &labels, &opts).unwrap()).collect();
    let first = (0..5).max_by(|&a, &b| single[a].total_cmp(&single[b]).then(b.cmp(&a))).unwrap();
    let pair: Vec<(usize, f64)> = (0..5)
        .filter(|&c| c != first)
        .map(|c| (c, joint_mi(&stack(&[first, c]), &labels, &opts).unwrap()))
        .collect();
    let second = pair
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0;
    assert_eq!(&all.indices[..2], &[first, second]);
    assert!((all.scores[0] - single[first]).abs() < 1e-12);
}

#[test]
fn ls_fit_recovers_planted_weights_on_orthogonal_design() {
    let mut r = rng::seeded(8);
    let n = 6;
    let q = DMatrix::from_fn(40, n, |_, _| gaussian(&mut r)).qr().q();
    let x = q * 40f64.sqrt();
    // the ridge shrinks weights by a relative 1e-8, so keep |w| ≤ 1
    let w = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
    let y = &x * &w;
    let p = LsProblem::new(
        x.transpose() * &x / 40.0,
        x.transpose() * &y / 40.0,
        y.norm_squared() / 40.0,
        40,
    )
    .unwrap();
    let fit = ls_fit(&p).unwrap();
    for i in 0..n {
        assert!((fit[(i, 0)] - w[i]).abs() < 1e-8);
    }
    // the tiny ridge barely moves a well-conditioned solution
    let exact = p.rxx.clone().lu().solve(&p.rxd).unwrap();
    assert!((fit - exact).amax() < 1e-7);
}

#[test]
fn closed_form_utility_matches_refit_on_200_problems() {
    let mut r = rng::seeded(9);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.gen_range(2..=10);
        let p = random_problem(&mut r, n);
        let w = ls_fit(&p).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let base = brute_cost(&p, &all);
        for c in 0..n {
            let rest: Vec<usize> = all.iter().copied().filter(|&j| j != c).collect();
            let brute = brute_cost(&p, &rest) - base;
            let closed = channel_utility(&p, &w, c).unwrap();
            assert!(brute >= -1e-12 && closed >= 0.0);
            worst = worst.max((brute - closed).abs());
        }
    }
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn grouped_multi_target_utility_matches_refit() {
    let mut r = rng::seeded(10);
    let x = DMatrix::from_fn(60, 6, |_, _| gaussian(&mut r));
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let p = classification_problem(&x, &labels, 3, 2).unwrap();
    assert_eq!(p.n_channels(), 3);
    let u = utilities(&p).unwrap();
    let all: Vec<usize> = (0..6).collect();
    let base = brute_cost(&p, &all);
    for c in 0..3 {
        let rest: Vec<usize> = all.iter().copied().filter(|&j| j / 2 != c).collect();
        assert!((brute_cost(&p, &rest) - base - u[c]).abs() < 1e-10);
    }
}

#[test]
fn duplicated_channels_have_no_utility() {
    let mut r = rng::seeded(11);
    let mut x = DMatrix::from_fn(200, 5, |_, _| gaussian(&mut r));
    let dup = x.column(1).into_owned();
    x.set_column(4, &dup);
    let y = DMatrix::from_fn(200, 1, |i, _| 2.0 * x[(i, 1)] + x[(i, 2)]);
    let p = LsProblem::from_design(&x, &y, (0..5).map(|c| vec![c]).collect()).unwrap();
    let u = utilities(&p).unwrap();
    assert!(u[1] < 1e-6 && u[4] < 1e-6, "{u:?}");
    assert!(u[2] > 0.5);
}

#[test]
fn zero_weight_uncorrelated_channel_has_zero_utility() {
    let rxx = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 1.5]));
    let p = LsProblem::new(rxx, DVector::from_vec(vec![0.4, 0.0, 0.7]), 2.0, 10).unwrap();
    let w = ls_fit(&p).unwrap();
    assert!(channel_utility(&p, &w, 1).unwrap().abs() < 1e-15);
}

#[test]
fn backward_elimination_keeps_planted_pair() {
    let mut hits = 0;
    for seed in 0..10 {
        let mut r = rng::seeded(100 + seed);
        let x = DMatrix::from_fn(300, 8, |_, _| gaussian(&mut r));
        let (a, b) = (r.gen_range(0..4), r.gen_range(4..8));
        let y = DMatrix::from_fn(300, 1, |i, _| x[(i, a)] - 0.8 * x[(i, b)] + gaussian(&mut r));
        let p = LsProblem::from_design(&x, &y, (0..8).map(|c| vec![c]).collect()).unwrap();
        let rank = utility_backward_eliminate(&p, 2).unwrap();
        let mut top = rank.top(2).to_vec();
        top.sort_unstable();
        hits += usize::from(top == vec![a, b]);
    }
    assert!(hits >= 9, "{hits}/10");
}

#[test]
fn backward_elimination_follows_brute_force_path() {
    let mut r = rng::seeded(12);
    for _ in 0..20 {
        let n = r.gen_range(3..=8);
        let p = random_problem(&mut r, n);
        let k = r.gen_range(1..n);
        let rank = utility_backward_eliminate(&p, k).unwrap();
        // replay: at each step drop the channel whose removal costs least
        let mut kept: Vec<usize> = (0..n).collect();
        let mut removed = Vec::new();
        while kept.len() > k {
            let base = brute_cost(&p, &kept);
            let increase: Vec<f64> = kept
                .iter()
                .map(|&c| {
                    let rest: Vec<usize> = kept.iter().copied().filter(|&j| j != c).collect();
                    brute_cost(&p, &rest) - base
                })
                .collect();
            let worst = (0..kept.len()).min_by(|&a, &b| increase[a].total_cmp(&increase[b])).unwrap();
            removed.push(kept.remove(worst));
        }
        let mut survivors = rank.top(k).to_vec();
        survivors.sort_unstable();
        assert_eq!(survivors, kept);
        removed.reverse();
        assert_eq!(&rank.indices[k..], &removed[..]);
    }
}

#[test]
fn envelope_problem_rejects_class_data() {
    let ds = synth_motor(
        &SynthConfig {
            samples: 4,
            ..SynthConfig::motor_preset()
        },
        &mut rng::seeded(0),
    )
    .unwrap();
    assert!(envelope_problem(&ds, &[0, 1]).is_err());
}
