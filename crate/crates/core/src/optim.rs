//! Adam with coupled weight decay and a warmup + step-decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup from `warmup_factor * lr` to `lr` over this many steps.
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    /// Steps at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3.5e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 10,
            warmup_factor: 0.1,
            milestones: vec![40, 70],
            decay_factor: 0.1,
        }
    }
}

impl OptimConfig {
    /// Learning rate at (zero-based) step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            self.warmup_factor + (1.0 - self.warmup_factor) * t
        } else {
            1.0
        };
        let decays = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * warm * self.decay_factor.powi(decays as i32)
    }
}

pub struct Adam {
    config: OptimConfig,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    steps: usize,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let lr = self.config.lr_at(self.steps);
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.config;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            let p = param.data_mut();
            for (i, &g0) in grad.data().iter().enumerate() {
                let g = g0 + c.weight_decay * p[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let vhat = *vi / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            warmup_factor: 0.1,
            milestones: vec![20, 30],
            decay_factor: 0.1,
            ..OptimConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(5) - 0.55).abs() < 1e-12);
        assert_eq!(c.lr_at(10), 1.0);
        assert!((c.lr_at(25) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(35) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            warmup_steps: 0,
            milestones: vec![],
            ..OptimConfig::default()
        });
        for _ in 0..500 {
            let x = store.get("x").unwrap().clone();
            let grads = BTreeMap::from([("x".to_string(), x.map(|v| 2.0 * v))]);
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("x").unwrap().norm() < 1e-2);
    }
}
