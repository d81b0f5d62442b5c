//! Symmetric FastICA with the `tanh` contrast.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct IcaOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-5,
            seed: 0,
        }
    }
}

/// Eigenvalues below this fraction of the largest are treated as rank loss.
const RANK_TOL: f64 = 1e-12;

/// Centering and PCA whitening of a `samples × d` matrix.
#[derive(Debug, Clone)]
pub struct Whitening {
    pub mean: DVector<f64>,
    /// `d × d`, maps centered data to unit covariance.
    pub matrix: DMatrix<f64>,
    /// `ln |det matrix|`.
    pub log_abs_det: f64,
}

impl Whitening {
    pub fn fit(data: &DMatrix<f64>) -> Result<Self> {
        let (m, d) = data.shape();
        if d == 0 || m < 2 || d > m {
            return Err(Error::InvalidInput(format!("cannot whiten {m}×{d} data")));
        }
        let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
        let centered = center(data, &mean);
        let cov = centered.transpose() * &centered / m as f64;
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.max();
        if !(top > 0.0) || eig.eigenvalues.iter().any(|&l| l <= RANK_TOL * top) {
            return Err(Error::InvalidInput(format!(
                "rank-deficient covariance (eigenvalues {:?})",
                eig.eigenvalues.as_slice()
            )));
        }
        let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let matrix = scale * eig.eigenvectors.transpose();
        let log_abs_det = -0.5 * eig.eigenvalues.iter().map(|l| l.ln()).sum::<f64>();
        Ok(Self {
            mean,
            matrix,
            log_abs_det,
        })
    }

    /// Whitened data, `samples × d`.
    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        center(data, &self.mean) * self.matrix.transpose()
    }
}

fn center(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = data.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

#[derive(Debug, Clone)]
pub struct Ica {
    pub whitening: Whitening,
    /// Orthogonal rotation in whitened space, `d × d`.
    pub rotation: DMatrix<f64>,
    pub iterations: usize,
    /// Smallest absolute excess kurtosis among recovered components. Values
    /// near zero mean some component is close to Gaussian and its direction
    /// is arbitrary.
    pub min_abs_kurtosis: f64,
}

impl Ica {
    /// Full unmixing `rotation · whitening`.
    pub fn unmixing(&self) -> DMatrix<f64> {
        &self.rotation * &self.whitening.matrix
    }

    /// `ln |det unmixing|`; the rotation contributes nothing.
    pub fn log_abs_det(&self) -> f64 {
        self.whitening.log_abs_det
    }

    /// Recovered components, `samples × d`.
    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        self.whitening.apply(data) * self.rotation.transpose()
    }

    pub fn is_gaussian_like(&self, kurtosis_threshold: f64) -> bool {
        self.min_abs_kurtosis < kurtosis_threshold
    }
}

/// `(W Wᵀ)^{-1/2} W`.
fn symmetric_decorrelate(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()))
        * eig.eigenvectors.transpose();
    inv_sqrt * w
}

fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Fit FastICA to a `samples × d` matrix (all `d` components).
pub fn fastica(data: &DMatrix<f64>, opts: &IcaOptions) -> Result<Ica> {
    let whitening = Whitening::fit(data)?;
    let z = whitening.apply(data);
    let (m, d) = z.shape();
    let mut r = rng::seeded(opts.seed);
    let mut w = symmetric_decorrelate(&DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut r)));
    let mut last_change = f64::INFINITY;
    for it in 1..=opts.max_iter {
        // y = z wᵀ, samples × d
        let y = &z * w.transpose();
        let g = y.map(f64::tanh);
        let g_prime_mean = DVector::from_fn(d, |k, _| {
            g.column(k).iter().map(|t| 1.0 - t * t).sum::<f64>() / m as f64
        });
        let mut next = g.transpose() * &z / m as f64;
        for k in 0..d {
            let scaled = w.row(k) * g_prime_mean[k];
            let mut row = next.row_mut(k);
            row -= scaled;
        }
        let next = symmetric_decorrelate(&next);
        last_change = (0..d)
            .map(|k| (1.0 - next.row(k).dot(&w.row(k)).abs()).abs())
            .fold(0.0, f64::max);
        w = next;
        if last_change < opts.tol {
            let comps = &z * w.transpose();
            let min_abs_kurtosis = comps
                .column_iter()
                .map(|c| excess_kurtosis(c.as_slice()).abs())
                .fold(f64::INFINITY, f64::min);
            return Ok(Ica {
                whitening,
                rotation: w,
                iterations: it,
                min_abs_kurtosis,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_change,
    })
}
