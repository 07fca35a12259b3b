//! Adam with decoupled weight decay.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must keep the same order and
    /// lengths across calls. A zero learning rate leaves parameters bitwise
    /// unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if c.lr == 0.0 {
            return;
        }
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.len(), g.len(), "gradient length matches parameter");
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut w = Tensor::vector(vec![1.0, -1.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut w], &[&[2.0, -3.0]]);
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut w = Tensor::vector(vec![0.3]);
        let before = w.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut [&mut w], &[&[5.0]]);
        assert!(w.bitwise_eq(&before));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = Tensor::vector(vec![5.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let g = [2.0 * (w.data()[0] - 1.5)];
            opt.step(&mut [&mut w], &[&g]);
        }
        assert!((w.data()[0] - 1.5).abs() < 1e-3);
    }
}
