//! Training objectives: cross-view and intra-view contrastive terms, the
//! vCLUB geometric-refinement term and relational distillation.

mod infonce;
mod relational;
mod vclub;

use serde::{Deserialize, Serialize};

pub use infonce::{
    cross_view_graph, cross_view_loss, info_nce, info_nce_graph, intra_view_graph, intra_view_loss,
    symmetric_info_nce_graph, CrossViewTerms,
};
pub use relational::{affinity, affinity_graph, relation_distill_graph, relation_distill_loss, AffinityMatrix};
pub use vclub::{
    geometric_refine_loss, loglik_graph, mi_upper_graph, vclub_loglik, vclub_mi_upper, VClubEstimator,
};

/// Which terms enter the total and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau_init: f64,
    pub learn_tau: bool,
    pub lambda_sc: f64,
    pub enable_ga: bool,
    pub enable_sc: bool,
    pub enable_rd: bool,
    /// Average both directions of each cross-view pair instead of using the
    /// first view as query only.
    pub symmetric: bool,
    /// Let the distillation gradient reach the point-cloud branch too.
    pub teacher_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.05,
            learn_tau: true,
            lambda_sc: 4.0,
            enable_ga: true,
            enable_sc: true,
            enable_rd: true,
            symmetric: false,
            teacher_grad: false,
        }
    }
}

/// Per-step loss values. Disabled terms are reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cross_view: f64,
    pub intra_view: f64,
    pub geometric: f64,
    pub relational: f64,
    pub total: f64,
    pub tau: f64,
    pub nce_drone_satellite: f64,
    pub nce_drone_pointcloud: f64,
    pub nce_satellite_pointcloud: f64,
}

/// `L_cc + L_rd + L_ga + λ·L_sc`, with disabled terms dropped.
pub fn total_loss(cross_view: f64, relational: f64, geometric: f64, intra_view: f64, cfg: &LossConfig) -> f64 {
    let mut total = cross_view;
    if cfg.enable_rd {
        total += relational;
    }
    if cfg.enable_ga {
        total += geometric;
    }
    if cfg.enable_sc {
        total += cfg.lambda_sc * intra_view;
    }
    total
}
