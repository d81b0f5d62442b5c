use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0; s.iter().product()];
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.numel() != self.m[i].len() {
                return Err(Error::shape("adam_step", format!("slot {i} size mismatch")));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::zeros(&[3]);
        let mut adam = Adam::new(AdamConfig::default(), &[&[3]]);
        adam.step(&mut [&mut p], &[Tensor::full(&[3], 1.0)]).unwrap();
        for &v in p.data() {
            assert!((v + 1e-3).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(&[2], 0.7);
        let mut adam = Adam::new(AdamConfig::default(), &[&[2]]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p.data(), &[0.7, 0.7]);
    }

    #[test]
    fn minimizes_quadratic() {
        // f(x) = (x - 3)^2
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &[&[1]],
        );
        for _ in 0..2000 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            adam.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn mismatched_slots_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut adam = Adam::new(AdamConfig::default(), &[&[3]]);
        assert!(adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).is_err());
    }
}
