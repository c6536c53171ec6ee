//! Adam optimizer over the name-indexed parameter registry.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    /// Step count; bias correction uses t after increment.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Adam> {
        cfg.validate()?;
        Ok(Adam { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Advance the step counter. Call once per update, before `apply`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter in place using the current step's bias
    /// correction. Callers iterate parameters however suits them.
    pub fn apply(&mut self, name: &str, p: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != p.data.len() {
            return Err(Error::Dim(format!(
                "{name}: gradient has {} entries, parameter {}",
                grad.len(),
                p.data.len()
            )));
        }
        let t = self.t as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        for i in 0..grad.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.data[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
        }
        if !p.is_finite() {
            return Err(Error::Numeric {
                node: 0,
                msg: format!("{name}: non-finite parameter after update"),
            });
        }
        Ok(())
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(
        &mut self,
        mut params: Vec<(String, &mut Tensor)>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.begin_step();
        for (name, p) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            self.apply(name, p, grad, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // With bias correction, the very first Adam step is ~lr * sign(g).
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.3, -0.7, 0.0001]);
        adam.step(vec![("p".into(), &mut p)], &grads, 0.01).unwrap();
        assert!((p.data[0] - (1.0 - 0.01)).abs() < 1e-4);
        assert!((p.data[1] - (-2.0 + 0.01)).abs() < 1e-4);
        assert!(p.data[2] < 0.5 && p.data[2] > 0.5 - 0.011);
    }

    #[test]
    fn quadratic_converges() {
        // Minimize (x - 3)^2 with a linearly decaying learning rate.
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = Tensor::vector(vec![-4.0]);
        let steps = 2000;
        for s in 0..steps {
            let g = 2.0 * (p.data[0] - 3.0);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), vec![g]);
            let lr = 0.05 * (steps - s) as f64 / steps as f64;
            adam.step(vec![("x".into(), &mut p)], &grads, lr).unwrap();
        }
        assert!((p.data[0] - 3.0).abs() < 1e-3, "converged to {}", p.data[0]);
    }

    #[test]
    fn missing_gradients_leave_parameters_untouched() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut q = Tensor::vector(vec![5.0]);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![1.0, 1.0]);
        adam.step(vec![("p".into(), &mut p), ("q".into(), &mut q)], &grads, 0.1).unwrap();
        assert_eq!(q.data, vec![5.0]);
        assert!(p.data[0] < 1.0);
        assert!(!adam.m.contains_key("q"));
    }
}
