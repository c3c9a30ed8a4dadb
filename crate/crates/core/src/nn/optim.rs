use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        let zeros = || {
            params
                .entries
                .iter()
                .map(|e| vec![0.0; e.value.len()])
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable entry; `grads` is aligned with `params.entries`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, entry) in params.entries.iter_mut().enumerate() {
            if !entry.role.trainable() {
                continue;
            }
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = std::sync::Arc::make_mut(&mut entry.value);
            for (k, p) in value.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= lr * weight_decay * *p;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::params::ParamBuilder;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut b = ParamBuilder::new();
        b.linear("fc", 2, 1);
        let mut p = b.build(&mut ChaCha8Rng::seed_from_u64(0));
        let before = p.value(0).clone();
        let grads = vec![
            Tensor::new(&[1, 2], vec![0.5, -2.0]).unwrap(),
            Tensor::zeros(&[1]),
        ];
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut p, &grads, 0.1);
        let after = p.value(0);
        assert!((after.data()[0] - (before.data()[0] - 0.1)).abs() < 1e-6);
        assert!((after.data()[1] - (before.data()[1] + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn running_stats_are_not_updated() {
        let mut b = ParamBuilder::new();
        b.batch_norm("bn", 2);
        let mut p = b.build(&mut ChaCha8Rng::seed_from_u64(0));
        let grads: Vec<Tensor> = p
            .entries
            .iter()
            .map(|e| Tensor::full(e.value.shape(), 1.0))
            .collect();
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        opt.step(&mut p, &grads, 0.1);
        assert_eq!(p.value(2).data(), &[0.0, 0.0]);
        assert_eq!(p.value(3).data(), &[1.0, 1.0]);
        assert_ne!(p.value(0).data(), &[1.0, 1.0]);
    }
}
