//! Mixture-of-multi-expert fusion of the global point-cloud feature.
//!
//! A softmax gate weighs `E` expert perceptrons of different hidden widths;
//! a shared linear expert runs alongside them. The output is the
//! concatenation `[g₁·E₁(f) | … | g_E·E_E(f) | E_h(f)]`, each block `D/(E+1)`
//! wide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Mat, Var};
use crate::error::{GeoLinkError, Result};
use crate::features::{FeatureBatch, ViewTag};
use crate::instrument;
use crate::nn::{Linear, Mlp, Parameterized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmeParams {
    /// `D_pc → E`, zero-initialized so routing starts uniform.
    pub gate: Linear,
    pub experts: Vec<Mlp>,
    /// The shared "1×1 convolution", a plain linear map on a global vector.
    pub shared: Linear,
}

/// Hidden width of expert `i`: cycles through `D/2`, `D`, `2D`.
pub fn expert_hidden(i: usize, output_dim: usize) -> usize {
    match i % 3 {
        0 => (output_dim / 2).max(1),
        1 => output_dim,
        _ => 2 * output_dim,
    }
}

impl MmeParams {
    pub fn new(input_dim: usize, output_dim: usize, expert_count: usize, seed: u64) -> Result<Self> {
        if expert_count == 0 || output_dim % (expert_count + 1) != 0 {
            return Err(GeoLinkError::DimMismatch(format!(
                "output dim {output_dim} is not divisible by expert count + 1 = {}",
                expert_count + 1
            )));
        }
        let block = output_dim / (expert_count + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..expert_count)
            .map(|i| Mlp::new(&mut rng, input_dim, expert_hidden(i, output_dim), block))
            .collect();
        Ok(Self {
            gate: Linear::zeros(input_dim, expert_count),
            experts,
            shared: Linear::new(&mut rng, input_dim, block),
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.gate.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.shared.out_dim() * (self.experts.len() + 1)
    }

    pub fn gate_forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        let logits = self.gate.forward(g, &format!("{prefix}.gate"), x);
        g.softmax_rows(logits)
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Var {
        instrument::record_mme_forward();
        let weights = self.gate_forward(g, prefix, x);
        let mut blocks = Vec::with_capacity(self.experts.len() + 1);
        for (i, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(g, &format!("{prefix}.expert{i}"), x);
            let w = g.slice_cols(weights, i, i + 1);
            blocks.push(g.mul_col(out, w));
        }
        blocks.push(self.shared.forward(g, &format!("{prefix}.shared"), x));
        g.concat_cols(&blocks)
    }

    fn check_input(&self, f_pc: &Mat) -> Result<()> {
        if f_pc.ncols() != self.input_dim() {
            return Err(GeoLinkError::DimMismatch(format!(
                "expert block expects width {}, got {}",
                self.input_dim(),
                f_pc.ncols()
            )));
        }
        if f_pc.iter().any(|v| !v.is_finite()) {
            return Err(GeoLinkError::NonFinite("point-cloud feature"));
        }
        Ok(())
    }
}

impl Parameterized for MmeParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.gate.visit(&format!("{prefix}.gate"), f);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&format!("{prefix}.expert{i}"), f);
        }
        self.shared.visit(&format!("{prefix}.shared"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.gate.visit_mut(&format!("{prefix}.gate"), f);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.expert{i}"), f);
        }
        self.shared.visit_mut(&format!("{prefix}.shared"), f);
    }
}

/// Per-sample expert weights, `B×E`, rows summing to one.
pub fn gate(params: &MmeParams, f_pc: &Mat) -> Result<Mat> {
    params.check_input(f_pc)?;
    Ok(softmax_rows(&params.gate.apply(f_pc)))
}

/// Fused 3D representation for a batch of global point-cloud features.
pub fn mme_forward(params: &MmeParams, f_pc: &FeatureBatch) -> Result<FeatureBatch> {
    params.check_input(&f_pc.values)?;
    let mut g = Graph::new();
    let x = g.constant(f_pc.values.clone());
    let out = params.forward(&mut g, "mme", x);
    FeatureBatch::new(g.value(out).clone(), ViewTag::Pointcloud, f_pc.scene_ids.clone())
}
