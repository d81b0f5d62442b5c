//! Entropy and mutual-information estimators and MI forward selection.

use nalgebra::DMatrix;
use statrs::function::gamma::digamma;

use super::ica::{fastica, IcaOptions, Whitening};
use super::ChannelRanking;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const KNN_K: usize = 3;
pub const MIN_ENTROPY_SAMPLES: usize = 10;
pub const MIN_CLASS_SAMPLES: usize = 10;
/// Neighbor distances are floored at this fraction of the sample standard
/// deviation so exact ties do not send the estimate to `-inf`.
const TIE_FLOOR: f64 = 1e-10;

/// Kozachenko–Leonenko differential entropy (nats) of 1-D samples, `k = 3`.
pub fn knn_entropy(x: &[f64]) -> Result<f64> {
    let m = x.len();
    if m < MIN_ENTROPY_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "knn_entropy needs at least {MIN_ENTROPY_SAMPLES} samples, got {m}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / m as f64;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
    let floor = (TIE_FLOOR * sd).max(f64::MIN_POSITIVE);
    let mut log_sum = 0.0;
    for i in 0..m {
        // merge outward from i to find the k-th nearest neighbor
        let (mut lo, mut hi) = (i, i);
        let mut eps = 0.0;
        for _ in 0..KNN_K {
            let left = if lo > 0 { Some(s[i] - s[lo - 1]) } else { None };
            let right = if hi + 1 < m { Some(s[hi + 1] - s[i]) } else { None };
            eps = match (left, right) {
                (Some(l), Some(r)) if l <= r => {
                    lo -= 1;
                    l
                }
                (Some(l), None) => {
                    lo -= 1;
                    l
                }
                (_, Some(r)) => {
                    hi += 1;
                    r
                }
                (None, None) => unreachable!("m > k"),
            };
        }
        log_sum += eps.max(floor).ln();
    }
    // unit-ball volume in 1-D is 2; eps is the neighbor radius
    Ok(digamma(m as f64) - digamma(KNN_K as f64) + 2f64.ln() + log_sum / m as f64)
}

/// Joint entropy of a `samples × d` block: ICA unmixing, then the sum of
/// marginal entropies minus `ln |det W|`. Falls back to PCA whitening if ICA
/// does not converge.
pub fn ica_entropy(block: &DMatrix<f64>, opts: &IcaOptions) -> Result<f64> {
    let (components, log_det) = match fastica(block, opts) {
        Ok(ica) => (ica.transform(block), ica.log_abs_det()),
        Err(Error::NonConvergence {
            iterations,
            last_change,
        }) => {
            log::debug!(
                "ICA did not converge after {iterations} iterations (change {last_change:.2e}); \
                 using PCA whitening"
            );
            let wh = Whitening::fit(block)?;
            (wh.apply(block), wh.log_abs_det)
        }
        Err(e) => return Err(e),
    };
    let mut h = -log_det;
    for col in components.column_iter() {
        h += knn_entropy(col.as_slice())?;
    }
    Ok(h)
}

fn rows(block: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), block.ncols(), |r, c| block[(idx[r], c)])
}

/// `I(X; Y) = H(X) − Σ_c p̂(c) H(X | c)`, clamped at 0.
pub fn joint_mi(block: &DMatrix<f64>, labels: &[usize], opts: &IcaOptions) -> Result<f64> {
    if block.nrows() != labels.len() {
        return Err(Error::shape(
            "joint_mi",
            format!("{} rows vs {} labels", block.nrows(), labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(0, |&l| l + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let present: Vec<(usize, &Vec<usize>)> =
        members.iter().enumerate().filter(|(_, v)| !v.is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::DegenerateClass {
            class: present.first().map_or(0, |p| p.0),
            count: labels.len(),
            min: MIN_CLASS_SAMPLES,
        });
    }
    if let Some(&(class, v)) = present.iter().find(|(_, v)| v.len() < MIN_CLASS_SAMPLES) {
        return Err(Error::DegenerateClass {
            class,
            count: v.len(),
            min: MIN_CLASS_SAMPLES,
        });
    }
    let m = labels.len() as f64;
    let mut mi = ica_entropy(block, opts)?;
    for (_, idx) in present {
        mi -= idx.len() as f64 / m * ica_entropy(&rows(block, idx), opts)?;
    }
    Ok(mi.max(0.0))
}

/// Greedy forward selection: at each step add the channel whose features,
/// appended to the accumulated block, give the largest joint MI with the
/// labels. `blocks[c]` is the `samples × d_c` feature matrix of channel `c`.
pub fn mi_forward_select(
    blocks: &[DMatrix<f64>],
    labels: &[usize],
    k: usize,
    opts: &IcaOptions,
    exec: Exec,
) -> Result<ChannelRanking> {
    let n = blocks.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("select {k} of {n} channels")));
    }
    let m = labels.len();
    if blocks.iter().any(|b| b.nrows() != m) {
        return Err(Error::shape("mi_forward_select", "block rows != labels"));
    }
    let mut selected = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for _ in 0..k {
        let candidates: Vec<usize> = (0..n).filter(|c| !selected.contains(c)).collect();
        let mi = par::try_map(exec, candidates.clone(), |c| {
            let mut chans = selected.clone();
            chans.push(c);
            joint_mi(&stack(blocks, &chans), labels, opts)
        })?;
        let best = (0..candidates.len())
            .max_by(|&a, &b| mi[a].total_cmp(&mi[b]).then(b.cmp(&a)))
            .expect("candidates nonempty");
        selected.push(candidates[best]);
        scores.push(mi[best]);
    }
    ChannelRanking::new(selected, scores)
}

/// Column-wise concatenation of the given channel blocks.
pub fn stack(blocks: &[DMatrix<f64>], channels: &[usize]) -> DMatrix<f64> {
    let m = blocks[channels[0]].nrows();
    let widths: Vec<usize> = channels.iter().map(|&c| blocks[c].ncols()).collect();
    let mut out = DMatrix::zeros(m, widths.iter().sum());
    let mut col = 0;
    for (&c, &w) in channels.iter().zip(&widths) {
        out.columns_mut(col, w).copy_from(&blocks[c]);
        col += w;
    }
    out
}
