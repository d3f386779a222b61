//! AdamW with decoupled weight decay, plus global gradient-norm clipping.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::nn::Parameterized;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Mat,
    second: Mat,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.01)
    }
}

/// Biases and the temperature are not decayed.
fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name == "log_tau")
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Update one named matrix in place. Moments are created on first use,
    /// so parameters that never receive a gradient keep no state.
    pub fn update(&mut self, name: &str, param: &mut Mat, grad: &Mat, lr: f64) {
        let m = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            first: Array2::zeros(param.dim()),
            second: Array2::zeros(param.dim()),
            steps: 0,
        });
        m.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        m.first.zip_mut_with(grad, |f, &g| *f = b1 * *f + (1.0 - b1) * g);
        m.second.zip_mut_with(grad, |s, &g| *s = b2 * *s + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(m.steps as i32);
        let c2 = 1.0 - b2.powi(m.steps as i32);
        if decays(name) && self.weight_decay > 0.0 {
            param.mapv_inplace(|p| p * (1.0 - lr * self.weight_decay));
        }
        let eps = self.eps;
        ndarray::Zip::from(param)
            .and(&m.first)
            .and(&m.second)
            .for_each(|p, &f, &s| *p -= lr * (f / c1) / ((s / c2).sqrt() + eps));
    }

    /// Apply `grads` (keyed by full parameter name) to everything under
    /// `prefix` in `model`.
    pub fn step(&mut self, model: &mut dyn Parameterized, prefix: &str, grads: &BTreeMap<String, Mat>, lr: f64) {
        model.visit_mut(prefix, &mut |name, p| {
            if let Some(g) = grads.get(&name) {
                self.update(&name, p, g, lr);
            }
        });
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
