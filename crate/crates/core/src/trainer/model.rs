//! Trainable state and the differentiable forward pass of one step.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::Result;
use crate::image_encoder::{EncoderParams, ImageBatch};
use crate::mme::MmeParams;
use crate::nn::{Linear, Parameterized};
use crate::objectives::{
    cross_view_graph, intra_view_graph, mi_upper_graph, relation_distill_graph, LossConfig, VClubEstimator,
};

pub const IMAGE: &str = "image";
pub const LOG_TAU: &str = "log_tau";
pub const MME: &str = "mme";
pub const PROJ: &str = "proj";
pub const VCLUB_DRONE: &str = "vclub_drone";
pub const VCLUB_SATELLITE: &str = "vclub_satellite";
/// Prefix shared by both estimators.
pub const VCLUB: &str = "vclub_";

/// Everything only needed while training: the 3D fusion, its projection
/// and the two mutual-information estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorBranch {
    pub mme: Option<MmeParams>,
    pub proj: Linear,
    pub vclub_drone: VClubEstimator,
    pub vclub_satellite: VClubEstimator,
    /// Per-dimension standardization of the raw point-cloud feature,
    /// fitted on the training split. Not trained.
    pub pc_mean: Mat,
    pub pc_scale: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub image: EncoderParams,
    pub log_tau: Mat,
    pub anchor: Option<AnchorBranch>,
}

fn seed_for(seed: u64, part: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(part)
}

impl Model {
    /// Fresh parameters. `pc_mean`/`pc_scale` are `1×D_pc`.
    pub fn new(cfg: &TrainConfig, pc_mean: Mat, pc_scale: Mat) -> Result<Self> {
        let d = cfg.feature_dim;
        let pc_dim = pc_mean.ncols();
        let image = EncoderParams::new(&cfg.image_config(), seed_for(cfg.seed, 1))?;
        let mme = if cfg.mme {
            Some(MmeParams::new(pc_dim, d, cfg.expert_count, seed_for(cfg.seed, 2))?)
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 3));
        let proj = Linear::new(&mut rng, if cfg.mme { d } else { pc_dim }, d);
        Ok(Self {
            image,
            log_tau: Array2::from_elem((1, 1), cfg.tau_init.ln()),
            anchor: Some(AnchorBranch {
                mme,
                proj,
                vclub_drone: VClubEstimator::new(d, d, cfg.vclub_hidden, seed_for(cfg.seed, 4))?,
                vclub_satellite: VClubEstimator::new(d, d, cfg.vclub_hidden, seed_for(cfg.seed, 5))?,
                pc_mean,
                pc_scale,
            }),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau[[0, 0]].exp()
    }

    /// Drop the 3D branch; what remains is all inference needs.
    pub fn strip_anchor(&mut self) {
        self.anchor = None;
    }
}

impl Parameterized for Model {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.image.visit(IMAGE, f);
        f(LOG_TAU.to_string(), &self.log_tau);
        if let Some(a) = &self.anchor {
            if let Some(m) = &a.mme {
                m.visit(MME, f);
            }
            a.proj.visit(PROJ, f);
            a.vclub_drone.visit(VCLUB_DRONE, f);
            a.vclub_satellite.visit(VCLUB_SATELLITE, f);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.image.visit_mut(IMAGE, f);
        f(LOG_TAU.to_string(), &mut self.log_tau);
        if let Some(a) = &mut self.anchor {
            if let Some(m) = &mut a.mme {
                m.visit_mut(MME, f);
            }
            a.proj.visit_mut(PROJ, f);
            a.vclub_drone.visit_mut(VCLUB_DRONE, f);
            a.vclub_satellite.visit_mut(VCLUB_SATELLITE, f);
        }
    }
}

/// Aligned inputs of one step. `drone` holds `views` consecutive images per
/// scene; they are averaged after encoding when `views > 1`.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub scene_ids: Vec<String>,
    pub drone: ImageBatch,
    pub drone_views: usize,
    pub satellite: ImageBatch,
    /// Raw global point-cloud features, `B×D_pc`.
    pub pc_features: Mat,
}

/// Normalized features of the three views.
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub drone: Var,
    pub satellite: Var,
    pub pointcloud: Var,
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cross_view: Var,
    pub nce_drone_satellite: Var,
    pub nce_drone_pointcloud: Var,
    pub nce_satellite_pointcloud: Var,
    pub intra_view: Option<Var>,
    pub geometric: Option<Var>,
    pub relational: Option<Var>,
    pub total: Var,
}

/// Encode both image views and the fused 3D feature onto the unit sphere.
pub fn forward_views(g: &mut Graph, model: &Model, batch: &TripletBatch) -> Result<ViewVars> {
    let anchor = model.anchor.as_ref().expect("training needs the 3D branch");
    let dro = model.image.forward(g, IMAGE, &batch.drone)?;
    let dro = if batch.drone_views > 1 {
        let n = g.normalize_rows(dro);
        g.block_mean_rows(n, batch.drone_views)
    } else {
        dro
    };
    let sat = model.image.forward(g, IMAGE, &batch.satellite)?;

    let standardized = (&batch.pc_features - &anchor.pc_mean) / &anchor.pc_scale;
    let pc = g.constant(standardized);
    let fused = match &anchor.mme {
        Some(m) => m.forward(g, MME, pc),
        None => pc,
    };
    let pc = anchor.proj.forward(g, PROJ, fused);
    Ok(ViewVars {
        drone: g.normalize_rows(dro),
        satellite: g.normalize_rows(sat),
        pointcloud: g.normalize_rows(pc),
    })
}

/// `exp(−log τ)` as a graph node.
pub fn inverse_temperature(g: &mut Graph, model: &Model) -> Var {
    let lt = g.param(LOG_TAU, &model.log_tau);
    let neg = g.scale(lt, -1.0);
    g.exp(neg)
}

/// All enabled losses on already-encoded views. Estimator parameters are
/// bound by name, so freezing `vclub_` on `g` holds them fixed.
pub fn build_losses(g: &mut Graph, model: &Model, v: ViewVars, cfg: &LossConfig) -> LossVars {
    let anchor = model.anchor.as_ref().expect("training needs the 3D branch");
    let inv_tau = inverse_temperature(g, model);
    let cc = cross_view_graph(g, v.drone, v.satellite, v.pointcloud, inv_tau, cfg.symmetric);
    let mut total = cc.total;

    let relational = cfg.enable_rd.then(|| {
        let teacher = if cfg.teacher_grad { v.pointcloud } else { g.detach(v.pointcloud) };
        let s = relation_distill_graph(g, v.satellite, teacher);
        let d = relation_distill_graph(g, v.drone, teacher);
        g.add(s, d)
    });
    if let Some(r) = relational {
        total = g.add(total, r);
    }

    let geometric = cfg.enable_ga.then(|| {
        let d = mi_upper_graph(g, &anchor.vclub_drone, VCLUB_DRONE, v.pointcloud, v.drone);
        let s = mi_upper_graph(g, &anchor.vclub_satellite, VCLUB_SATELLITE, v.pointcloud, v.satellite);
        g.add(d, s)
    });
    if let Some(ga) = geometric {
        total = g.add(total, ga);
    }

    let intra_view = cfg.enable_sc.then(|| intra_view_graph(g, v.drone, v.satellite, v.pointcloud, inv_tau));
    if let Some(sc) = intra_view {
        let weighted = g.scale(sc, cfg.lambda_sc);
        total = g.add(total, weighted);
    }

    LossVars {
        cross_view: cc.total,
        nce_drone_satellite: cc.drone_satellite,
        nce_drone_pointcloud: cc.drone_pointcloud,
        nce_satellite_pointcloud: cc.satellite_pointcloud,
        intra_view,
        geometric,
        relational,
        total,
    }
}
