//! Relational distillation from the 3D teacher to the 2D students.
//!
//! Both sides are summarized by their normalized pairwise-distance
//! affinities, so only the relative geometry of a batch is transferred.

use ndarray::Array2;

use crate::autodiff::{pairwise_distances, Graph, Mat, Var};
use crate::error::{GeoLinkError, Result};
use crate::features::FeatureBatch;

/// `B×B` normalized distances; zero diagonal, off-diagonal entries sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub values: Mat,
}

impl AffinityMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn uniform(b: usize) -> Mat {
    let v = 1.0 / (b * (b - 1)) as f64;
    Array2::from_shape_fn((b, b), |(i, j)| if i == j { 0.0 } else { v })
}

/// Affinity of a batch of features. A batch whose rows all coincide yields
/// the uniform matrix.
pub fn affinity(features: &FeatureBatch) -> Result<AffinityMatrix> {
    let b = features.len();
    if b < 2 {
        return Err(GeoLinkError::BatchTooSmall(b));
    }
    let d = pairwise_distances(&features.values);
    let total = d.sum();
    let values = if total > 0.0 { d / total } else { uniform(b) };
    Ok(AffinityMatrix { values })
}

pub fn affinity_graph(g: &mut Graph, f: Var) -> Var {
    let b = g.value(f).nrows();
    let d = g.pairwise_dist(f);
    let total = g.sum(d);
    if g.scalar(total) > 0.0 {
        g.div_scalar(d, total)
    } else {
        g.constant(uniform(b))
    }
}

/// `1/(B(B−1)) Σ_{i≠j} (A_student − A_teacher)²`.
pub fn relation_distill_graph(g: &mut Graph, student: Var, teacher: Var) -> Var {
    let b = g.value(student).nrows() as f64;
    let a_s = affinity_graph(g, student);
    let a_t = affinity_graph(g, teacher);
    let diff = g.sub(a_s, a_t);
    let sq = g.mul(diff, diff);
    let total = g.sum(sq);
    g.scale(total, 1.0 / (b * (b - 1.0)))
}

/// `L_rd^(sat) + L_rd^(dro)` with the point-cloud features as teacher.
pub fn relation_distill_loss(
    f_dro: &FeatureBatch,
    f_sat: &FeatureBatch,
    f_pc: &FeatureBatch,
) -> Result<f64> {
    f_pc.check_aligned(f_dro)?;
    f_pc.check_aligned(f_sat)?;
    if f_pc.len() < 2 {
        return Err(GeoLinkError::BatchTooSmall(f_pc.len()));
    }
    let mut g = Graph::new();
    let d = g.constant(f_dro.values.clone());
    let s = g.constant(f_sat.values.clone());
    let t = g.constant(f_pc.values.clone());
    let ls = relation_distill_graph(&mut g, s, t);
    let ld = relation_distill_graph(&mut g, d, t);
    let total = g.add(ls, ld);
    Ok(g.scalar(total))
}
