use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::data::EpochDataset;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const N_BANDS: usize = 9;
pub const BAND_WIDTH_HZ: f64 = 4.0;
pub const BAND_LOW_HZ: f64 = 4.0;

/// `[lo, hi)` edges of the 4 Hz bands covering 4–40 Hz.
pub fn default_bands() -> [(f64, f64); N_BANDS] {
    std::array::from_fn(|b| {
        let lo = BAND_LOW_HZ + BAND_WIDTH_HZ * b as f64;
        (lo, lo + BAND_WIDTH_HZ)
    })
}

/// Hann-windowed periodogram of one signal.
pub struct BandPowerEstimator {
    fs: f64,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bands: Vec<(f64, f64)>,
}

impl BandPowerEstimator {
    pub fn new(n_times: usize, fs: f64, bands: &[(f64, f64)]) -> Result<Self> {
        if !(fs > 0.0) || bands.is_empty() {
            return Err(Error::InvalidInput(format!("fs {fs}, {} bands", bands.len())));
        }
        // at most 2 Hz bin spacing, so every 4 Hz band holds two bins
        if (n_times as f64) < 2.0 * fs / BAND_WIDTH_HZ {
            return Err(Error::InvalidInput(format!(
                "{n_times} samples at {fs} Hz is too short for {BAND_WIDTH_HZ} Hz bands"
            )));
        }
        let top = bands.iter().map(|b| b.1).fold(0.0, f64::max);
        if top > fs / 2.0 {
            return Err(Error::InvalidInput(format!("band edge {top} Hz above Nyquist")));
        }
        let window = (0..n_times)
            .map(|j| 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / n_times as f64).cos())
            .collect();
        Ok(Self {
            fs,
            window,
            fft: FftPlanner::new().plan_fft_forward(n_times),
            bands: bands.to_vec(),
        })
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn estimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.window.len();
        if x.len() != t {
            return Err(Error::shape("band_power", format!("signal length {} != {t}", x.len())));
        }
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .zip(&self.window)
            .map(|(v, w)| Complex::new(v * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let df = self.fs / t as f64;
        Ok(self
            .bands
            .iter()
            .map(|&(lo, hi)| {
                let (mut sum, mut count) = (0.0, 0usize);
                for (k, c) in buf.iter().enumerate().take(t / 2 + 1) {
                    let f = k as f64 * df;
                    if f >= lo && f < hi {
                        sum += c.norm_sqr();
                        count += 1;
                    }
                }
                sum / count.max(1) as f64
            })
            .collect())
    }
}

/// Mean squared magnitude of the Hann-windowed FFT bins inside each band.
pub fn band_power(x: &[f64], fs: f64, bands: &[(f64, f64)]) -> Result<Vec<f64>> {
    BandPowerEstimator::new(x.len(), fs, bands)?.estimate(x)
}

/// Per-sample, per-channel band powers, `[M][N][bands]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPowerFeatures {
    pub n_samples: usize,
    pub n_channels: usize,
    pub n_bands: usize,
    pub fs: f64,
    pub values: Vec<f64>,
}

impl BandPowerFeatures {
    pub fn compute(ds: &EpochDataset, exec: Exec) -> Result<Self> {
        let bands = default_bands();
        let est = BandPowerEstimator::new(ds.n_times, ds.fs, &bands)?;
        let rows = par::try_map_range(exec, ds.n_samples, |i| {
            let mut row = Vec::with_capacity(ds.n_channels * N_BANDS);
            for c in 0..ds.n_channels {
                row.extend(est.estimate(ds.channel(i, c))?);
            }
            Ok::<_, Error>(row)
        })?;
        Ok(Self {
            n_samples: ds.n_samples,
            n_channels: ds.n_channels,
            n_bands: N_BANDS,
            fs: ds.fs,
            values: rows.concat(),
        })
    }

    pub fn get(&self, sample: usize, channel: usize) -> &[f64] {
        let start = (sample * self.n_channels + channel) * self.n_bands;
        &self.values[start..start + self.n_bands]
    }

    /// `rows × bands` matrix of log band powers for one channel.
    pub fn log_block(&self, channel: usize, rows: &[usize]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(rows.len(), self.n_bands, |r, b| {
            log_power(self.get(rows[r], channel)[b])
        })
    }

    /// Log band powers of the given channels as one `rows × (channels·bands)` design.
    pub fn log_design(&self, channels: &[usize], rows: &[usize]) -> nalgebra::DMatrix<f64> {
        let nb = self.n_bands;
        nalgebra::DMatrix::from_fn(rows.len(), channels.len() * nb, |r, j| {
            log_power(self.get(rows[r], channels[j / nb])[j % nb])
        })
    }
}

/// Floor keeps silent channels finite.
pub const LOG_POWER_FLOOR: f64 = 1e-12;

pub fn log_power(p: f64) -> f64 {
    p.max(LOG_POWER_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_cover_4_to_40() {
        let b = default_bands();
        assert_eq!(b[0], (4.0, 8.0));
        assert_eq!(b[8], (36.0, 40.0));
    }

    #[test]
    fn sinusoid_concentrates_in_its_band() {
        let fs = 250.0;
        let x: Vec<f64> = (0..250)
            .map(|j| (std::f64::consts::TAU * 10.0 * j as f64 / fs).sin())
            .collect();
        let p = band_power(&x, fs, &default_bands()).unwrap();
        let best = (0..9).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(best, 1);
        assert!(p[1] > 100.0 * p[3]);
    }

    #[test]
    fn zero_signal_and_short_signal() {
        let p = band_power(&[0.0; 250], 250.0, &default_bands()).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
        assert!(band_power(&[0.0; 100], 250.0, &default_bands()).is_err());
    }
}
