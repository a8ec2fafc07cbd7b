use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
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

/// Adam with decoupled weight decay, driven by the gradient buffers of a
/// [`ParamStore`]. Gradients are not cleared by [`AdamW::step`].
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let grads: Vec<(String, Tensor)> = params
            .iter_grads()
            .map(|(n, g)| (n.to_string(), g.clone()))
            .collect();
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let p = params.value_mut(&name);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * (weight_decay * *pi + mhat / (vhat.sqrt() + eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, -3.0]));
        let before = p.checkpoint_id();
        p.accumulate_grad("w", &Tensor::vector(vec![10.0, -1.0])).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut p);
        assert_eq!(p.checkpoint_id(), before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 1.0]));
        p.accumulate_grad("w", &Tensor::vector(vec![0.3, -5.0])).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut p);
        let w = p.get("w").data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![4.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            p.zero_grad();
            let g = Tensor::vector(p.get("x").data().iter().map(|v| 2.0 * (v - 1.0)).collect());
            p.accumulate_grad("x", &g).unwrap();
            opt.step(&mut p);
        }
        assert!(p.get("x").data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
