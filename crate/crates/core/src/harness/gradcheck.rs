//! Finite-difference check of the full selector → MSFBCNN → loss stack.

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Mode, Tensor};
use crate::error::Result;
use crate::models::{build_msfbcnn, ModelConfig};
use crate::rng;
use crate::selector::{
    concrete_weights_var, duplicate_penalty_var, sample_gumbel, selection_probabilities, SelectorLayer,
};

/// Small MSFBCNN fed by a concrete selector, trained-mode batch norm,
/// cross-entropy plus the duplicate penalty. `τ` sits halfway between the
/// two largest row sums of `P`, so exactly one hinge is active and no row
/// sum is near the kink.
pub fn selector_stack_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (n, k, t, b) = (5, 2, 16, 6);
    let mut r = rng::seeded(opts.seed);
    let cfg = ModelConfig {
        channels: k,
        times: t,
        temporal_filters: 2,
        spatial_filters: 2,
        classes: 3,
        dropout: 0.0,
        kernel_sizes: vec![5, 3],
        pool: 4,
        pool_stride: 2,
    };
    let mut net = build_msfbcnn(&cfg, &mut r)?;
    let mut selector = SelectorLayer::new(n, k, &mut r);
    selector.log_alpha = Tensor::from_fn(&[n, k], |_| rand::Rng::gen_range(&mut r, -1.0..1.0));
    selector.beta = 0.7;
    let noise = sample_gumbel(&[n, k], &mut r);
    let x = Tensor::from_fn(&[b, n, t], |_| rand::Rng::gen_range(&mut r, -1.0..1.0));
    let labels: Vec<usize> = (0..b).map(|i| i % cfg.classes).collect();

    let p = selection_probabilities(&selector);
    let mut sums: Vec<f64> = p.data().chunks(k).map(|row| row.iter().sum()).collect();
    sums.sort_by(|a, b| b.total_cmp(a));
    let tau = 0.5 * (sums[0] + sums[1]);

    let mut store = net.params.clone();
    let n_net = store.len();
    store.register("selector.log_alpha", selector.log_alpha.clone());
    grad_check(
        &store,
        |tape, vars| {
            let la = vars[n_net];
            let w = concrete_weights_var(tape, la, &noise, selector.beta)?;
            let xv = tape.constant(x.clone());
            let z = tape.matmul_tn(w, xv)?;
            let out = net.forward(tape, &vars[..n_net], z, Mode::Train, &mut rng::seeded(0))?;
            let ce = tape.softmax_cross_entropy(out, &labels)?;
            let p = tape.softmax_rows(la)?;
            let pen = duplicate_penalty_var(tape, p, 0.1, tau)?;
            tape.add(ce, pen)
        },
        opts,
        None,
    )
}
