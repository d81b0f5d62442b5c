//! Multi-channel epoch datasets: synthetic generators with known
//! informative channels, standardization, splitting and file I/O.

pub mod io;
pub mod synth;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use synth::{synth_envelope, synth_motor, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Class { labels: Vec<usize>, classes: usize },
    /// Regression target per sample and time point, `M×T`.
    Envelope(Vec<f64>),
}

/// `M` samples of `N` channels × `T` points, row-major `[M][N][T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDataset {
    pub n_samples: usize,
    pub n_channels: usize,
    pub n_times: usize,
    pub fs: f64,
    pub samples: Vec<f64>,
    pub labels: Labels,
    pub splits: Vec<Split>,
    pub truth_channels: Vec<usize>,
}

impl EpochDataset {
    pub fn validate(&self) -> Result<()> {
        let (m, n, t) = (self.n_samples, self.n_channels, self.n_times);
        if m == 0 || n == 0 || t == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if self.samples.len() != m * n * t || self.splits.len() != m {
            return Err(Error::InvalidInput(format!(
                "{} values / {} split tags for {m}×{n}×{t}",
                self.samples.len(),
                self.splits.len()
            )));
        }
        match &self.labels {
            Labels::Class { labels, classes } => {
                if labels.len() != m {
                    return Err(Error::InvalidInput("label count mismatch".into()));
                }
                if let Some(&l) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: *classes,
                    });
                }
            }
            Labels::Envelope(y) => {
                if y.len() != m * t {
                    return Err(Error::InvalidInput("envelope length mismatch".into()));
                }
            }
        }
        if self.truth_channels.iter().any(|&c| c >= n) {
            return Err(Error::InvalidInput("truth channel out of range".into()));
        }
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.n_channels * self.n_times;
        &self.samples[i * len..(i + 1) * len]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[f64] {
        let t = self.n_times;
        &self.sample(i)[c * t..(c + 1) * t]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_samples)
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.labels, Labels::Class { .. })
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.labels {
            Labels::Class { classes, .. } => Some(*classes),
            Labels::Envelope(_) => None,
        }
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Class { labels, .. } => Some(labels),
            Labels::Envelope(_) => None,
        }
    }

    /// `[B×N×T]` tensor of the given samples.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.n_channels * self.n_times);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(&[idx.len(), self.n_channels, self.n_times], data).expect("batch shape")
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        let l = self.class_labels().expect("classification dataset");
        idx.iter().map(|&i| l[i]).collect()
    }

    /// Concatenated regression targets of the given samples.
    pub fn batch_targets(&self, idx: &[usize]) -> Vec<f64> {
        let Labels::Envelope(y) = &self.labels else {
            panic!("regression dataset expected");
        };
        let t = self.n_times;
        idx.iter()
            .flat_map(|&i| y[i * t..(i + 1) * t].iter().copied())
            .collect()
    }

    /// Keep only the channels in `idx` (in that order). Truth channels are
    /// remapped to their new positions.
    pub fn select_channels(&self, idx: &[usize]) -> Result<EpochDataset> {
        if idx.is_empty() || idx.iter().any(|&c| c >= self.n_channels) {
            return Err(Error::InvalidInput(format!("bad channel subset {idx:?}")));
        }
        let t = self.n_times;
        let mut samples = Vec::with_capacity(self.n_samples * idx.len() * t);
        for i in 0..self.n_samples {
            for &c in idx {
                samples.extend_from_slice(self.channel(i, c));
            }
        }
        let truth_channels = idx
            .iter()
            .enumerate()
            .filter(|(_, c)| self.truth_channels.contains(c))
            .map(|(j, _)| j)
            .collect();
        Ok(EpochDataset {
            n_channels: idx.len(),
            samples,
            truth_channels,
            ..self.clone()
        })
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

/// Per-channel statistics over the train split.
pub fn train_channel_stats(ds: &EpochDataset) -> Result<ChannelStats> {
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    let count = (train.len() * ds.n_times) as f64;
    let mut mean = vec![0.0; ds.n_channels];
    let mut std = vec![0.0; ds.n_channels];
    for c in 0..ds.n_channels {
        let s: f64 = train.iter().map(|&i| ds.channel(i, c).iter().sum::<f64>()).sum();
        mean[c] = s / count;
        let ss: f64 = train
            .iter()
            .map(|&i| ds.channel(i, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
            .sum();
        std[c] = (ss / count).sqrt();
    }
    Ok(ChannelStats { mean, std })
}

/// Zero-mean, unit-variance channels using train-split statistics only.
/// Channels with `σ < 1e-12` become zeros.
pub fn standardize(ds: &EpochDataset) -> Result<EpochDataset> {
    let stats = train_channel_stats(ds)?;
    let mut out = ds.clone();
    let (n, t) = (ds.n_channels, ds.n_times);
    for (j, v) in out.samples.iter_mut().enumerate() {
        let c = (j / t) % n;
        *v = if stats.std[c] < MIN_STD {
            0.0
        } else {
            (*v - stats.mean[c]) / stats.std[c]
        };
    }
    Ok(out)
}

/// Assign train/val(/test) tags with the given fractions. Classification
/// datasets are stratified: each class is shuffled separately and classes
/// are interleaved before cutting, so per-class proportions hold to within
/// one sample.
pub fn split<R: Rng + ?Sized>(ds: &EpochDataset, fractions: &[f64], rng: &mut R) -> Result<EpochDataset> {
    if !(2..=3).contains(&fractions.len())
        || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidInput(format!(
            "split fractions {fractions:?} must be 2 or 3 values summing to 1"
        )));
    }
    let m = ds.n_samples;
    let order: Vec<usize> = match &ds.labels {
        Labels::Class { labels, classes } => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); *classes];
            for (i, &l) in labels.iter().enumerate() {
                per_class[l].push(i);
            }
            for v in &mut per_class {
                v.shuffle(rng);
            }
            // interleave by relative position within each class
            let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(m);
            for (c, v) in per_class.iter().enumerate() {
                for (j, &i) in v.iter().enumerate() {
                    keyed.push(((j as f64 + 0.5) / v.len() as f64, c, i));
                }
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.into_iter().map(|(_, _, i)| i).collect()
        }
        Labels::Envelope(_) => {
            let mut v: Vec<usize> = (0..m).collect();
            v.shuffle(rng);
            v
        }
    };
    let n_train = (fractions[0] * m as f64).round() as usize;
    let n_val = if fractions.len() == 3 {
        (fractions[1] * m as f64).round() as usize
    } else {
        m - n_train
    };
    let n_val = n_val.min(m - n_train);
    let mut out = ds.clone();
    for (pos, &i) in order.iter().enumerate() {
        out.splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy(m: usize, classes: usize) -> EpochDataset {
        let mut r = rng::seeded(1);
        EpochDataset {
            n_samples: m,
            n_channels: 3,
            n_times: 4,
            fs: 100.0,
            samples: (0..m * 12).map(|_| r.gen_range(-5.0..9.0)).collect(),
            labels: Labels::Class {
                labels: (0..m).map(|i| i % classes).collect(),
                classes,
            },
            splits: vec![Split::Train; m],
            truth_channels: vec![1],
        }
    }

    #[test]
    fn standardize_uses_train_only() {
        let ds = split(&toy(200, 2), &[0.8, 0.2], &mut rng::seeded(3)).unwrap();
        let st = standardize(&ds).unwrap();
        let stats = train_channel_stats(&st).unwrap();
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-10);
            assert!((stats.std[c] - 1.0).abs() < 1e-10);
        }
        // val values follow the train transform exactly
        let raw = train_channel_stats(&ds).unwrap();
        let v = ds.indices(Split::Val)[0];
        let expect = (ds.channel(v, 2)[1] - raw.mean[2]) / raw.std[2];
        assert!((st.channel(v, 2)[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_becomes_zero() {
        let mut ds = toy(10, 2);
        for i in 0..10 {
            for t in 0..4 {
                ds.samples[i * 12 + 4 + t] = 3.0;
            }
        }
        let st = standardize(&ds).unwrap();
        assert!((0..10).all(|i| st.channel(i, 1).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn empty_train_split_rejected() {
        let mut ds = toy(5, 2);
        ds.splits = vec![Split::Test; 5];
        assert!(standardize(&ds).is_err());
    }

    #[test]
    fn split_sizes_and_strata() {
        let ds = toy(1000, 4);
        let s = split(&ds, &[0.8, 0.1, 0.1], &mut rng::seeded(7)).unwrap();
        assert_eq!(s.indices(Split::Train).len(), 800);
        assert_eq!(s.indices(Split::Val).len(), 100);
        assert_eq!(s.indices(Split::Test).len(), 100);
        for split_tag in [Split::Train, Split::Val, Split::Test] {
            let idx = s.indices(split_tag);
            for c in 0..4 {
                let count = idx.iter().filter(|&&i| i % 4 == c).count() as f64;
                let expect = idx.len() as f64 / 4.0;
                assert!((count - expect).abs() <= 1.0, "{split_tag:?} class {c}: {count}");
            }
        }
        let two = split(&ds, &[0.8, 0.2], &mut rng::seeded(7)).unwrap();
        assert_eq!(two.indices(Split::Train).len(), 800);
        assert_eq!(two.indices(Split::Val).len(), 200);
        assert!(split(&ds, &[0.5, 0.6], &mut rng::seeded(7)).is_err());
    }

    #[test]
    fn select_channels_remaps_truth() {
        let ds = toy(4, 2);
        let sub = ds.select_channels(&[2, 1]).unwrap();
        assert_eq!(sub.truth_channels, vec![1]);
        assert_eq!(sub.channel(3, 0), ds.channel(3, 2));
        assert!(ds.select_channels(&[3]).is_err());
    }
}
