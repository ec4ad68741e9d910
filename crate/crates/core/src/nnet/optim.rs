use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// AMSGrad hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmsGrad {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AmsGrad {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers of AMSGrad, one entry per network parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub hyper: AmsGrad,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Running elementwise maximum of `v`.
    pub v_hat: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(n_params: usize, hyper: AmsGrad) -> Self {
        Self {
            hyper,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            v_hat: vec![T::zero(); n_params],
            step: 0,
        }
    }

    /// One update. The first moment is bias-corrected, `v_hat` is not.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let b1 = T::lit(self.hyper.beta1);
        let b2 = T::lit(self.hyper.beta2);
        let one = T::one();
        let corr = T::lit(1.0 - self.hyper.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let lr = T::lit(self.hyper.lr);
        let eps = T::lit(self.hyper.eps);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + (one - b1) * g;
            let v = b2 * self.v[i] + (one - b2) * g * g;
            let vh = if v > self.v_hat[i] { v } else { self.v_hat[i] };
            self.m[i] = m;
            self.v[i] = v;
            self.v_hat[i] = vh;
            params[i] -= lr * (m / corr) / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = OptimizerState::<f64>::new(3, AmsGrad::default());
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn scalar_first_step_by_hand() {
        // m = 0.1, m_hat = 1, v = v_hat = 0.001 (uncorrected).
        let mut opt = OptimizerState::<f64>::new(1, AmsGrad::default());
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0]);
        let expected = -0.001 * 1.0 / (0.001f64.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert!((p[0] + 0.031_622_766_6).abs() < 1e-9);
    }

    #[test]
    fn v_hat_never_decreases() {
        let mut opt = OptimizerState::<f64>::new(2, AmsGrad::default());
        let mut p = vec![0.0, 0.0];
        let grads = [[5.0, -1.0], [0.1, 0.0], [0.0, 3.0], [-0.2, 0.01]];
        let mut prev = opt.v_hat.clone();
        for g in grads {
            opt.step(&mut p, &g);
            for (a, b) in opt.v_hat.iter().zip(&prev) {
                assert!(a >= b);
            }
            prev = opt.v_hat.clone();
        }
    }
}
