use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (sampled).
    pub max_coords_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: usize::MAX,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare backprop gradients of `loss_fn` against central differences.
///
/// `loss_fn` builds the scalar loss on a fresh tape from the bound
/// parameters and must be a deterministic function of the parameter values.
/// `corrupt` is applied to the analytic gradients before comparison, which
/// lets callers verify that the checker flags bad gradients.
pub fn grad_check<F>(
    store: &ParamStore,
    mut loss_fn: F,
    opts: &GradCheckOptions,
    corrupt: Option<&dyn Fn(&mut Vec<Tensor>)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic = store.collect_grads(&vars, &grads);
    if let Some(c) = corrupt {
        c(&mut analytic);
    }

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let l = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        tolerance: opts.tolerance,
    };
    for pi in 0..store.len() {
        let n = store.get(pi).value.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for ci in coords {
            let orig = store.get(pi).value.data()[ci];
            work.get_mut(pi).value.data_mut()[ci] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(pi).value.data_mut()[ci] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(pi).value.data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = rel_error(analytic[pi].data()[ci], numeric, opts.floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(pi).name.clone(), ci));
            }
        }
    }
    Ok(report)
}
