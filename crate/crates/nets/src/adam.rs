use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.9, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected step. With `lr == 0` the parameters are untouched.
    pub fn step<T: Real>(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr = c.lr * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            let g = grad[i].to_f64c() as f32;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if lr != 0.0 {
                let upd = lr * self.m[i] as f64 / ((self.v[i] as f64).sqrt() + c.eps * bc2.sqrt());
                params[i] -= T::from_f64c(upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, 2);
        let mut p = [1.0f64, -2.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-6 && (p[1] + 1.99).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, 3);
        let mut p = [0.1f32, 0.2, 0.3];
        for _ in 0..5 {
            adam.step(&mut p, &[1.0, -1.0, 0.5]);
        }
        assert_eq!(p, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 1);
        let mut p = [3.0f64];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 0.05, "{p:?}");
    }
}
