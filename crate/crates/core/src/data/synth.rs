//! Synthetic datasets with planted informative channels.
//!
//! Every channel carries 1/f background noise of unit variance.
//!
//! * motor: informative channel `i` also carries a sinusoid at 10 Hz (even
//!   `i`) or 22 Hz (odd `i`) whose amplitude depends on the class. With `B`
//!   class bits, channel `i` encodes bit `i mod B` of the label, raising or
//!   lowering its rhythm amplitude by the modulation depth (sign fixed per
//!   channel), with 10% amplitude jitter per trial. The SNR is the ratio of
//!   rhythm power to background power inside the 4 Hz band containing the
//!   rhythm.
//! * envelope: a smooth random envelope is the regression target;
//!   informative channels carry it filtered by a short channel-specific FIR
//!   kernel. The SNR is the ratio of filtered-envelope power to total
//!   background power.
//!
//! All values are rounded to `f32` so datasets survive the on-disk format
//! bit for bit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{EpochDataset, Labels, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub times: usize,
    pub samples: usize,
    pub fs: f64,
    pub informative: usize,
    pub classes: usize,
    /// `-inf` switches the planted signal off.
    pub snr_db: f64,
    /// Relative rhythm amplitude change between the two values of a class
    /// bit (motor data only): the gain is `1 ± modulation`.
    pub modulation: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn motor_preset() -> Self {
        Self {
            channels: 16,
            times: 250,
            samples: 400,
            fs: 250.0,
            informative: 4,
            classes: 4,
            snr_db: 10.0,
            modulation: 0.2,
            seed: 0,
        }
    }

    pub fn envelope_preset() -> Self {
        Self {
            channels: 16,
            times: 256,
            samples: 200,
            fs: 64.0,
            informative: 4,
            classes: 0,
            snr_db: 10.0,
            modulation: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self, classification: bool) -> Result<()> {
        if self.channels == 0 || self.times < 8 || self.samples == 0 || !(self.fs > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "synthetic dims: {} channels, {} times, {} samples, fs {}",
                self.channels, self.times, self.samples, self.fs
            )));
        }
        if self.informative > self.channels {
            return Err(Error::InvalidConfig(format!(
                "{} informative channels out of {}",
                self.informative, self.channels
            )));
        }
        if classification && self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.modulation) {
            return Err(Error::InvalidConfig(format!("modulation {}", self.modulation)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::INFINITY {
            return Err(Error::InvalidConfig(format!("snr_db {}", self.snr_db)));
        }
        Ok(())
    }
}

pub const MOTOR_RHYTHMS_HZ: [f64; 2] = [10.0, 22.0];
const MIN_NOISE_HZ: f64 = 1.0;

/// Spectral shaping for unit-variance 1/f noise of length `t`.
struct PinkShaper {
    gains: Vec<f64>,
    freqs: Vec<f64>,
    planner: FftPlanner<f64>,
}

impl PinkShaper {
    fn new(t: usize, fs: f64) -> Self {
        let freqs: Vec<f64> = (0..t)
            .map(|k| k.min(t - k) as f64 * fs / t as f64)
            .collect();
        let mut gains: Vec<f64> = freqs
            .iter()
            .map(|&f| if f == 0.0 { 0.0 } else { 1.0 / f.max(MIN_NOISE_HZ).sqrt() })
            .collect();
        let mean_power = gains.iter().map(|g| g * g).sum::<f64>() / t as f64;
        let norm = mean_power.sqrt();
        for g in &mut gains {
            *g /= norm;
        }
        Self {
            gains,
            freqs,
            planner: FftPlanner::new(),
        }
    }

    /// Fraction of the noise variance inside `[lo, hi)` Hz.
    fn band_fraction(&self, lo: f64, hi: f64) -> f64 {
        let total: f64 = self.gains.iter().map(|g| g * g).sum();
        let band: f64 = self
            .gains
            .iter()
            .zip(&self.freqs)
            .filter(|(_, &f)| f >= lo && f < hi)
            .map(|(g, _)| g * g)
            .sum();
        band / total
    }

    fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let t = self.gains.len();
        let mut buf: Vec<Complex<f64>> = (0..t)
            .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
            .collect();
        self.planner.plan_fft_forward(t).process(&mut buf);
        for (b, g) in buf.iter_mut().zip(&self.gains) {
            *b *= *g;
        }
        self.planner.plan_fft_inverse(t).process(&mut buf);
        buf.iter().map(|c| c.re / t as f64).collect()
    }
}

fn snr_linear(db: f64) -> f64 {
    if db == f64::NEG_INFINITY {
        0.0
    } else {
        10f64.powf(db / 10.0)
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn class_bits(classes: usize) -> usize {
    (usize::BITS - (classes - 1).leading_zeros()).max(1) as usize
}

/// Classification dataset with class-modulated rhythms on the informative
/// channels (the first `informative` channels after a seeded shuffle).
pub fn synth_motor<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<EpochDataset> {
    cfg.validate(true)?;
    let (n, t, m) = (cfg.channels, cfg.times, cfg.samples);
    let mut truth = rand::seq::index::sample(rng, n, cfg.informative).into_vec();
    truth.sort_unstable();
    let signs: Vec<f64> = (0..cfg.informative)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let mut shaper = PinkShaper::new(t, cfg.fs);
    let bits = class_bits(cfg.classes);
    let snr = snr_linear(cfg.snr_db);
    // mean square of the class gain 1 ± d
    let gain_ms = 1.0 + cfg.modulation * cfg.modulation;
    let amps: Vec<f64> = (0..cfg.informative)
        .map(|i| {
            let f = MOTOR_RHYTHMS_HZ[i % 2];
            let band_lo = (f / 4.0).floor() * 4.0;
            let noise_band = shaper.band_fraction(band_lo, band_lo + 4.0);
            (2.0 * snr * noise_band / gain_ms).sqrt()
        })
        .collect();

    let mut labels: Vec<usize> = (0..m).map(|i| i % cfg.classes).collect();
    labels.shuffle(rng);
    let mut samples = Vec::with_capacity(m * n * t);
    for &label in &labels {
        for c in 0..n {
            let mut x = shaper.sample(rng);
            if let Some(i) = truth.iter().position(|&tc| tc == c) {
                let bit = (label >> (i % bits)) & 1;
                let gain = 1.0 + cfg.modulation * signs[i] * if bit == 1 { 1.0 } else { -1.0 };
                let jitter = 1.0 + 0.1 * rng.gen_range(-1.0..1.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let w = std::f64::consts::TAU * MOTOR_RHYTHMS_HZ[i % 2] / cfg.fs;
                let a = amps[i] * gain * jitter;
                for (j, v) in x.iter_mut().enumerate() {
                    *v += a * (w * j as f64 + phase).sin();
                }
            }
            samples.extend(x.into_iter().map(quantize));
        }
    }
    let ds = EpochDataset {
        n_samples: m,
        n_channels: n,
        n_times: t,
        fs: cfg.fs,
        samples,
        labels: Labels::Class {
            labels,
            classes: cfg.classes,
        },
        splits: vec![Split::Train; m],
        truth_channels: truth,
    };
    ds.validate()?;
    Ok(ds)
}

fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn standardized(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    for v in &mut x {
        *v = (*v - mean) / sd;
    }
    x
}

pub const ENVELOPE_FIR_TAPS: usize = 5;

/// Regression dataset: target is a smooth random envelope, informative
/// channels carry FIR-filtered copies of it.
pub fn synth_envelope<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<EpochDataset> {
    cfg.validate(false)?;
    let (n, t, m) = (cfg.channels, cfg.times, cfg.samples);
    let mut truth = rand::seq::index::sample(rng, n, cfg.informative).into_vec();
    truth.sort_unstable();
    let firs: Vec<Vec<f64>> = (0..cfg.informative)
        .map(|_| {
            (0..ENVELOPE_FIR_TAPS)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    (-(j as f64) / 2.0).exp() * (1.0 + 0.3 * z)
                })
                .collect()
        })
        .collect();
    let smooth = ((cfg.fs / 8.0).round() as usize).max(3);
    let snr = snr_linear(cfg.snr_db);
    let mut shaper = PinkShaper::new(t, cfg.fs);
    let mut samples = Vec::with_capacity(m * n * t);
    let mut targets = Vec::with_capacity(m * t);
    for _ in 0..m {
        let white: Vec<f64> = (0..t).map(|_| StandardNormal.sample(rng)).collect();
        let env = standardized(moving_average(&moving_average(&white, smooth), smooth));
        for c in 0..n {
            let noise = shaper.sample(rng);
            let x: Vec<f64> = match truth.iter().position(|&tc| tc == c) {
                Some(i) if snr > 0.0 => {
                    let h = &firs[i];
                    let s: Vec<f64> = (0..t)
                        .map(|j| (0..h.len().min(j + 1)).map(|l| h[l] * env[j - l]).sum())
                        .collect();
                    let p = s.iter().map(|v| v * v).sum::<f64>() / t as f64;
                    let scale = (p / snr).sqrt();
                    s.iter().zip(&noise).map(|(a, b)| a + scale * b).collect()
                }
                _ => noise,
            };
            samples.extend(x.into_iter().map(quantize));
        }
        targets.extend(env.into_iter().map(quantize));
    }
    let ds = EpochDataset {
        n_samples: m,
        n_channels: n,
        n_times: t,
        fs: cfg.fs,
        samples,
        labels: Labels::Envelope(targets),
        splits: vec![Split::Train; m],
        truth_channels: truth,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn pink_noise_has_unit_variance() {
        let mut shaper = PinkShaper::new(256, 250.0);
        let mut r = rng::seeded(0);
        let mut total = 0.0;
        for _ in 0..200 {
            let x = shaper.sample(&mut r);
            total += x.iter().map(|v| v * v).sum::<f64>() / 256.0;
        }
        assert!((total / 200.0 - 1.0).abs() < 0.05, "{}", total / 200.0);
        let low = shaper.band_fraction(4.0, 8.0);
        let high = shaper.band_fraction(36.0, 40.0);
        assert!(low > 3.0 * high);
    }

    #[test]
    fn class_bit_count() {
        assert_eq!(class_bits(2), 1);
        assert_eq!(class_bits(3), 2);
        assert_eq!(class_bits(4), 2);
        assert_eq!(class_bits(5), 3);
    }

    #[test]
    fn deterministic_and_quantized() {
        let cfg = SynthConfig {
            samples: 20,
            ..SynthConfig::motor_preset()
        };
        let a = synth_motor(&cfg, &mut rng::seeded(4)).unwrap();
        let b = synth_motor(&cfg, &mut rng::seeded(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|&v| v == v as f32 as f64));
        assert_eq!(a.truth_channels.len(), 4);
        let e1 = synth_envelope(&SynthConfig::envelope_preset(), &mut rng::seeded(2)).unwrap();
        let e2 = synth_envelope(&SynthConfig::envelope_preset(), &mut rng::seeded(2)).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SynthConfig::motor_preset();
        cfg.informative = 17;
        assert!(synth_motor(&cfg, &mut rng::seeded(0)).is_err());
        cfg.informative = 2;
        cfg.snr_db = f64::NAN;
        assert!(synth_motor(&cfg, &mut rng::seeded(0)).is_err());
        cfg.snr_db = 0.0;
        cfg.classes = 1;
        assert!(synth_motor(&cfg, &mut rng::seeded(0)).is_err());
    }
}
