//! Least-squares channel utility and greedy backward elimination.
//!
//! A channel owns a group of design columns (one column for an instantaneous
//! decoder, several for lagged or multi-feature decoders). Dropping channel
//! `c` with column set `S` and re-optimizing the remaining weights raises the
//! ridge-regularized LS cost by `tr(W_Sᵀ ([R̃⁻¹]_SS)⁻¹ W_S)`, with
//! `R̃ = R_xx + δI`. For a single column and a single target this is
//! `w_c² / [R̃⁻¹]_cc`.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::ChannelRanking;
use crate::data::{EpochDataset, Labels};
use crate::error::{Error, Result};

pub const RIDGE_FACTOR: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LsProblem {
    /// `P × P` autocorrelation of the design columns.
    pub rxx: DMatrix<f64>,
    /// `P × Q` cross-correlation with the targets.
    pub rxd: DMatrix<f64>,
    /// Mean squared target, summed over targets.
    pub rdd: f64,
    pub n_samples: usize,
    /// Design columns owned by each channel.
    pub groups: Vec<Vec<usize>>,
    /// Original channel index of each group.
    pub channels: Vec<usize>,
    /// Ridge `δ`, fixed at construction and kept by sub-problems.
    pub delta: f64,
}

impl LsProblem {
    /// Problem with one design column per channel.
    pub fn new(rxx: DMatrix<f64>, rxd: DVector<f64>, rdd: f64, n_samples: usize) -> Result<Self> {
        let p = rxx.nrows();
        let groups = (0..p).map(|c| vec![c]).collect();
        Self::grouped(rxx, DMatrix::from_column_slice(p, 1, rxd.as_slice()), rdd, n_samples, groups)
    }

    pub fn grouped(
        rxx: DMatrix<f64>,
        rxd: DMatrix<f64>,
        rdd: f64,
        n_samples: usize,
        groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let p = rxx.nrows();
        if p == 0 || rxx.ncols() != p || rxd.nrows() != p || rxd.ncols() == 0 {
            return Err(Error::shape(
                "LsProblem",
                format!("R {:?}, r {:?}", rxx.shape(), rxd.shape()),
            ));
        }
        let asym = (&rxx - rxx.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidInput(format!("R_xx asymmetric by {asym:.3e}")));
        }
        let min_eig = rxx.clone().symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidInput(format!("R_xx has eigenvalue {min_eig:.3e}")));
        }
        let mut seen = vec![false; p];
        for &j in groups.iter().flatten() {
            if j >= p || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidInput(format!("bad column {j} in channel groups")));
            }
        }
        if seen.iter().any(|s| !s) || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::InvalidInput("channel groups must partition the columns".into()));
        }
        let delta = RIDGE_FACTOR * rxx.trace() / p as f64;
        let channels = (0..groups.len()).collect();
        Ok(Self {
            rxx,
            rxd,
            rdd,
            n_samples,
            groups,
            channels,
            delta,
        })
    }

    /// Problem from a `samples × P` design and `samples × Q` targets; both
    /// are centered with their own column means first.
    pub fn from_design(x: &DMatrix<f64>, y: &DMatrix<f64>, groups: Vec<Vec<usize>>) -> Result<Self> {
        let m = x.nrows();
        if m == 0 || y.nrows() != m {
            return Err(Error::shape("LsProblem::from_design", format!("{m} vs {} rows", y.nrows())));
        }
        let xc = centered(x);
        let yc = centered(y);
        let rxx = (xc.transpose() * &xc) / m as f64;
        let rxx = (&rxx + rxx.transpose()) * 0.5;
        let rxd = xc.transpose() * &yc / m as f64;
        let rdd = yc.iter().map(|v| v * v).sum::<f64>() / m as f64;
        Self::grouped(rxx, rxd, rdd, m, groups)
    }

    pub fn n_channels(&self) -> usize {
        self.groups.len()
    }

    pub fn n_columns(&self) -> usize {
        self.rxx.nrows()
    }

    pub fn regularized(&self) -> DMatrix<f64> {
        &self.rxx + DMatrix::identity(self.n_columns(), self.n_columns()) * self.delta
    }

    /// Regularized LS cost `E‖d − Wᵀx‖² + δ‖W‖²` of the given weights.
    pub fn cost(&self, w: &DMatrix<f64>) -> f64 {
        self.rdd - 2.0 * w.dot(&self.rxd) + w.dot(&(self.regularized() * w))
    }

    /// Keep the given groups (positions into `self.groups`), in order.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&g| g >= self.n_channels()) {
            return Err(Error::InvalidInput(format!("bad channel subset {keep:?}")));
        }
        let cols: Vec<usize> = keep.iter().flat_map(|&g| self.groups[g].iter().copied()).collect();
        let mut groups = Vec::with_capacity(keep.len());
        let mut next = 0;
        for &g in keep {
            let len = self.groups[g].len();
            groups.push((next..next + len).collect());
            next += len;
        }
        Ok(Self {
            rxx: self.rxx.select_rows(&cols).select_columns(&cols),
            rxd: self.rxd.select_rows(&cols),
            rdd: self.rdd,
            n_samples: self.n_samples,
            groups,
            channels: keep.iter().map(|&g| self.channels[g]).collect(),
            delta: self.delta,
        })
    }

    fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.regularized())
            .ok_or_else(|| Error::InvalidInput("R_xx + δI is not positive definite".into()))
    }
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// `W = (R_xx + δI)⁻¹ r_xd`, `P × Q`.
pub fn ls_fit(problem: &LsProblem) -> Result<DMatrix<f64>> {
    Ok(problem.cholesky()?.solve(&problem.rxd))
}

fn group_utility(inv: &DMatrix<f64>, w: &DMatrix<f64>, cols: &[usize]) -> Result<f64> {
    let ws = w.select_rows(cols);
    let block = inv.select_rows(cols).select_columns(cols);
    let chol = Cholesky::new(block)
        .ok_or_else(|| Error::InvalidInput("inverse block not positive definite".into()))?;
    let u = ws.dot(&chol.solve(&ws));
    Ok(u.max(0.0))
}

/// LS cost increase when `channel` is dropped and the rest refit.
pub fn channel_utility(problem: &LsProblem, w: &DMatrix<f64>, channel: usize) -> Result<f64> {
    let cols = problem
        .groups
        .get(channel)
        .ok_or_else(|| Error::InvalidInput(format!("channel {channel} out of range")))?;
    if w.shape() != problem.rxd.shape() {
        return Err(Error::shape("channel_utility", format!("w {:?}", w.shape())));
    }
    let inv = problem.cholesky()?.inverse();
    group_utility(&inv, w, cols)
}

/// Utilities of every channel of the problem at its LS optimum.
pub fn utilities(problem: &LsProblem) -> Result<Vec<f64>> {
    let chol = problem.cholesky()?;
    let w = chol.solve(&problem.rxd);
    let inv = chol.inverse();
    problem.groups.iter().map(|g| group_utility(&inv, &w, g)).collect()
}

/// Remove the lowest-utility channel and refit until `k` remain.
///
/// The ranking lists the survivors by final utility (descending), then the
/// eliminated channels from last removed to first. Scores are the utility
/// of each channel at the moment it was last evaluated.
pub fn utility_backward_eliminate(problem: &LsProblem, k: usize) -> Result<ChannelRanking> {
    let n = problem.n_channels();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("keep {k} of {n} channels")));
    }
    let mut current = problem.clone();
    let mut removed: Vec<(usize, f64)> = Vec::with_capacity(n - k);
    let mut util = utilities(&current)?;
    while current.n_channels() > k {
        let worst = (0..util.len())
            .min_by(|&a, &b| util[a].total_cmp(&util[b]))
            .expect("channels nonempty");
        removed.push((current.channels[worst], util[worst]));
        let keep: Vec<usize> = (0..current.n_channels()).filter(|&g| g != worst).collect();
        current = current.restrict(&keep)?;
        util = utilities(&current)?;
    }
    let mut survivors: Vec<(usize, f64)> = current.channels.iter().copied().zip(util).collect();
    survivors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (indices, scores) = survivors.into_iter().chain(removed.into_iter().rev()).unzip();
    ChannelRanking::new(indices, scores)
}

/// Instantaneous linear decoder from the given samples of an envelope
/// dataset: every (sample, time) pair is one observation, one column per
/// channel.
pub fn envelope_problem(ds: &EpochDataset, samples: &[usize]) -> Result<LsProblem> {
    let Labels::Envelope(_) = &ds.labels else {
        return Err(Error::InvalidInput("envelope dataset expected".into()));
    };
    let (n, t) = (ds.n_channels, ds.n_times);
    let rows = samples.len() * t;
    let x = DMatrix::from_fn(rows, n, |r, c| ds.channel(samples[r / t], c)[r % t]);
    let y = DMatrix::from_column_slice(rows, 1, &ds.batch_targets(samples));
    LsProblem::from_design(&x, &y, (0..n).map(|c| vec![c]).collect())
}

/// One-vs-rest LS problem: `design` is `samples × (N·width)` with channel
/// `c` owning columns `c·width..(c+1)·width`; targets are class indicators.
pub fn classification_problem(
    design: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
    width: usize,
) -> Result<LsProblem> {
    if width == 0 || design.ncols() % width != 0 {
        return Err(Error::shape("classification_problem", format!("{} columns", design.ncols())));
    }
    let y = DMatrix::from_fn(labels.len(), classes, |i, c| f64::from(u8::from(labels[i] == c)));
    let groups = (0..design.ncols() / width)
        .map(|c| (c * width..(c + 1) * width).collect())
        .collect();
    LsProblem::from_design(design, &y, groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_problem() {
        let mut r = DVector::zeros(5);
        r[3] = 1.0;
        let p = LsProblem::new(DMatrix::identity(5, 5), r, 1.0, 10).unwrap();
        let w = ls_fit(&p).unwrap();
        assert!((w[(3, 0)] - 1.0).abs() < 1e-7);
        assert!(w.iter().enumerate().all(|(i, &v)| i == 3 || v == 0.0));
        assert!(channel_utility(&p, &w, 0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_matrices() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = 0.5;
        assert!(LsProblem::new(a, DVector::zeros(2), 1.0, 1).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(LsProblem::new(neg, DVector::zeros(2), 1.0, 1).is_err());
    }

    #[test]
    fn keep_all_channels_removes_nothing() {
        let p = LsProblem::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
            DVector::from_vec(vec![0.3, 0.1, 0.2]),
            1.0,
            10,
        )
        .unwrap();
        let r = utility_backward_eliminate(&p, 3).unwrap();
        let mut idx = r.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2]);
    }
}
