use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use chansel::baselines::{mi_forward_select, IcaOptions};
use chansel::data::{synth_motor, Labels, SynthConfig};
use chansel::harness::{run_experiment, ExperimentConfig, TrainData};
use chansel::par::Exec;
use chansel::rng;
use chansel::selector::{empirical_selection_frequencies, SelectorLayer};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn motor(samples: usize, channels: usize) -> chansel::data::EpochDataset {
    let cfg = SynthConfig {
        samples,
        channels,
        ..SynthConfig::motor_preset()
    };
    synth_motor(&cfg, &mut rng::seeded(0)).unwrap()
}

fn frequencies(c: &mut Criterion) {
    let layer = SelectorLayer::new(32, 8, &mut rng::seeded(1));
    let mut g = c.benchmark_group("selection_frequencies");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| empirical_selection_frequencies(&layer, 10_000, 2, exec).unwrap())
        });
    }
    g.finish();
}

fn features(c: &mut Criterion) {
    let ds = motor(200, 16);
    let mut g = c.benchmark_group("band_power_features");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| TrainData::band_power(&ds, exec).unwrap())
        });
    }
    g.finish();
}

fn mi(c: &mut Criterion) {
    let ds = motor(200, 8);
    let data = TrainData::band_power(&ds, Exec::Sequential).unwrap();
    let blocks: Vec<DMatrix<f64>> = (0..ds.n_channels)
        .map(|ch| {
            DMatrix::from_fn(ds.n_samples, data.len, |s, f| {
                data.x[(s * ds.n_channels + ch) * data.len + f].max(1e-12).ln()
            })
        })
        .collect();
    let Labels::Class { labels: ref y, .. } = ds.labels else {
        unreachable!()
    };
    let mut g = c.benchmark_group("mi_forward_select");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mi_forward_select(&blocks, y, 2, &IcaOptions::default(), exec).unwrap())
        });
    }
    g.finish();
}

fn experiment(c: &mut Criterion) {
    let cfg = ExperimentConfig::parse(
        "samples = 150\nchannels = 8\nk = 2\nruns = 4\nmax_epochs = 20\nmethods = gumbel-reg\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut g = c.benchmark_group("run_experiment");
    g.sample_size(10);
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_experiment(&cfg, dir.path(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, frequencies, features, mi, experiment);
criterion_main!(benches);
