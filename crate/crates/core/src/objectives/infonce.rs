use crate::autodiff::{Graph, Var};
use crate::error::{GeoLinkError, Result};
use crate::features::FeatureBatch;

/// `−mean_i log softmax_j(q_i·r_j / τ)[i]`, the positive for query `i` being
/// reference `i`. `inv_tau` is a `1×1` node holding `1/τ`.
pub fn info_nce_graph(g: &mut Graph, q: Var, r: Var, inv_tau: Var) -> Var {
    let rt = g.transpose(r);
    let sims = g.matmul(q, rt);
    let logits = g.mul_scalar(sims, inv_tau);
    let log_probs = g.log_softmax_rows(logits);
    let positive = g.diag_mean(log_probs);
    g.scale(positive, -1.0)
}

/// Average of both directions.
pub fn symmetric_info_nce_graph(g: &mut Graph, q: Var, r: Var, inv_tau: Var) -> Var {
    let a = info_nce_graph(g, q, r, inv_tau);
    let b = info_nce_graph(g, r, q, inv_tau);
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

/// The three cross-view terms `L(dro,sat)`, `L(dro,pc)`, `L(sat,pc)`.
pub struct CrossViewTerms {
    pub drone_satellite: Var,
    pub drone_pointcloud: Var,
    pub satellite_pointcloud: Var,
    pub total: Var,
}

pub fn cross_view_graph(
    g: &mut Graph,
    dro: Var,
    sat: Var,
    pc: Var,
    inv_tau: Var,
    symmetric: bool,
) -> CrossViewTerms {
    let nce = if symmetric {
        symmetric_info_nce_graph
    } else {
        info_nce_graph
    };
    let drone_satellite = nce(g, dro, sat, inv_tau);
    let drone_pointcloud = nce(g, dro, pc, inv_tau);
    let satellite_pointcloud = nce(g, sat, pc, inv_tau);
    let partial = g.add(drone_satellite, drone_pointcloud);
    let total = g.add(partial, satellite_pointcloud);
    CrossViewTerms {
        drone_satellite,
        drone_pointcloud,
        satellite_pointcloud,
        total,
    }
}

/// Self-as-positive InfoNCE summed over the three views.
pub fn intra_view_graph(g: &mut Graph, dro: Var, sat: Var, pc: Var, inv_tau: Var) -> Var {
    let a = info_nce_graph(g, dro, dro, inv_tau);
    let b = info_nce_graph(g, sat, sat, inv_tau);
    let c = info_nce_graph(g, pc, pc, inv_tau);
    let ab = g.add(a, b);
    g.add(ab, c)
}

pub(crate) fn check_pair(q: &FeatureBatch, r: &FeatureBatch) -> Result<()> {
    if q.len() < 2 {
        return Err(GeoLinkError::BatchTooSmall(q.len()));
    }
    if q.len() != r.len() || q.dim() != r.dim() {
        return Err(GeoLinkError::DimMismatch(format!(
            "{}×{} against {}×{}",
            q.len(),
            q.dim(),
            r.len(),
            r.dim()
        )));
    }
    Ok(())
}

fn with_graph<F>(batches: &[&FeatureBatch], tau: f64, f: F) -> f64
where
    F: FnOnce(&mut Graph, &[Var], Var) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = batches.iter().map(|b| g.constant(b.values.clone())).collect();
    let inv_tau = g.scalar_constant(1.0 / tau);
    let out = f(&mut g, &vars, inv_tau);
    g.scalar(out)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(GeoLinkError::ConfigError(format!("temperature must be positive, got {tau}")))
    }
}

/// InfoNCE of `q_batch` against `ref_batch` (query first).
pub fn info_nce(q_batch: &FeatureBatch, ref_batch: &FeatureBatch, tau: f64) -> Result<f64> {
    check_pair(q_batch, ref_batch)?;
    check_tau(tau)?;
    Ok(with_graph(&[q_batch, ref_batch], tau, |g, v, t| {
        info_nce_graph(g, v[0], v[1], t)
    }))
}

/// `L(dro,sat) + L(dro,pc) + L(sat,pc)`; all three batches must list the
/// same scenes in the same order.
pub fn cross_view_loss(
    f_dro: &FeatureBatch,
    f_sat: &FeatureBatch,
    f_pc: &FeatureBatch,
    tau: f64,
) -> Result<f64> {
    f_dro.check_aligned(f_sat)?;
    f_dro.check_aligned(f_pc)?;
    check_pair(f_dro, f_sat)?;
    check_pair(f_dro, f_pc)?;
    check_tau(tau)?;
    Ok(with_graph(&[f_dro, f_sat, f_pc], tau, |g, v, t| {
        cross_view_graph(g, v[0], v[1], v[2], t, false).total
    }))
}

pub fn intra_view_loss(
    f_dro: &FeatureBatch,
    f_sat: &FeatureBatch,
    f_pc: &FeatureBatch,
    tau: f64,
) -> Result<f64> {
    for f in [f_dro, f_sat, f_pc] {
        check_pair(f, f)?;
    }
    check_tau(tau)?;
    Ok(with_graph(&[f_dro, f_sat, f_pc], tau, |g, v, t| {
        intra_view_graph(g, v[0], v[1], v[2], t)
    }))
}
