//! AdamW with decoupled weight decay: the decay shrinks the parameter
//! directly (before the moment-based update term), so it never leaks into
//! the adaptive moments. Biases, normalization parameters, and low-rank B
//! factors are excluded from decay via their store flag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<usize, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Only parameters present in `grads` (i.e. trainable
    /// parameters that received gradients) are touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<usize, Vec<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(self.cfg.lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();
        let bc1 = one / (one - b1.powi(t));
        let bc2 = one / (one - b2.powi(t));

        for (&pid_idx, grad) in grads {
            let pid = ParamId(pid_idx);
            if !store.requires_grad(pid) {
                continue;
            }
            let decay = store.decay(pid);
            let (m, v) = self
                .moments
                .entry(pid_idx)
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let data = store.data_mut(pid);
            debug_assert_eq!(data.len(), grad.len());
            for i in 0..data.len() {
                if decay {
                    data[i] -= lr * wd * data[i];
                }
                let gi = grad[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] * bc1;
                let v_hat = v[i] * bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
