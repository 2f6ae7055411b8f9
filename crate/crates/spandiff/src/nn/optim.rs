//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Decay is decoupled: it scales the weight directly rather
    /// than entering the moment estimates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let w = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            for i in 0..grad.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let wv = w.data()[i];
                w.data_mut()[i] =
                    wv - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * wv);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        // Single weight w=1, grad g=0.5, lr=0.1, no decay.
        // m1 = 0.1*0.5... wait: m1 = (1-b1)*g = 0.05; v1 = (1-b2)*g² = 2.5e-4
        // mhat = g, vhat = g² after bias correction, so update = lr * g/(|g|+eps) ≈ lr.
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.5));
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut params, &grads);
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8));
        assert!((params.get("w").item() - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled() {
        // Zero gradient: pure decay shrinks the weight by lr*wd*w.
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0));
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut params, &grads);
        assert!((params.get("w").item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_rows(&[vec![3.0, 4.0]]));
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = grads["a"].data().iter().map(|x| x * x).sum::<f64>();
        assert!((post.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn below_threshold_untouched() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_rows(&[vec![0.3, 0.4]]));
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads["a"], Tensor::from_rows(&[vec![0.3, 0.4]]));
    }
}
