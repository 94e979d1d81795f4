//! Adam with bias correction.

use alloc::vec::Vec;

use crate::error::{GallatError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(GallatError::contract("optimizer state does not match parameter list"));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        for k in 0..params.len() {
            let (p, g) = (&mut params[k], &grads[k]);
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(GallatError::dimension("adam", p.shape(), g.shape()));
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                *w -= cfg.lr * (*mi / c1) / (libm::sqrt(*vi / c2) + cfg.eps);
            }
        }
        Ok(())
    }
}
