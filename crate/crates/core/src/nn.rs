//! Small dense building blocks shared by the learned modules.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};

/// Anything holding named trainable matrices.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

/// `y = x W + b`, `W: in×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Mat,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: fan_in_uniform(rng, fan_in, fan_out),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let w = g.param(&format!("{prefix}.weight"), &self.weight);
        let b = g.param(&format!("{prefix}.bias"), &self.bias);
        g.affine(x, w, b)
    }

    /// Plain evaluation without a graph.
    pub fn apply(&self, x: &Mat) -> Mat {
        x.dot(&self.weight) + &self.bias
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::new(rng, input, hidden),
            fc2: Linear::new(rng, hidden, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let h = self.fc1.forward(g, &format!("{prefix}.fc1"), x);
        let h = g.gelu(h);
        self.fc2.forward(g, &format!("{prefix}.fc2"), h)
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let h = self.fc1.apply(x).mapv(crate::autodiff::gelu);
        self.fc2.apply(&h)
    }
}

impl Parameterized for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}
