//! Variational contrastive log-ratio upper bound (vCLUB) on mutual
//! information.
//!
//! The variational conditional is a unit-covariance Gaussian
//! `v(y|x) = N(y; μ(x), I)` with `μ` a small perceptron, so up to an
//! additive constant `log v(y|x) = −½‖y − μ(x)‖²`. The estimator is fitted
//! by maximum likelihood on paired samples and then frozen while the bound
//! is minimized with respect to the features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infonce::check_pair;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{GeoLinkError, Result};
use crate::features::FeatureBatch;
use crate::nn::{Mlp, Parameterized};
use crate::optim::AdamW;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VClubEstimator {
    /// `x ↦ μ(x)`: linear, GELU, linear.
    pub mean_map: Mlp,
}

impl VClubEstimator {
    pub fn new(x_dim: usize, y_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(GeoLinkError::ConfigError("vCLUB hidden width must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            mean_map: Mlp::new(&mut rng, x_dim, hidden, y_dim),
        })
    }

    pub fn hidden(&self) -> usize {
        self.mean_map.fc1.out_dim()
    }

    pub fn predict(&self, x: &Mat) -> Mat {
        self.mean_map.apply(x)
    }

    /// One gradient-ascent step on the paired log-likelihood. Returns the
    /// log-likelihood before the update.
    pub fn ml_step(&mut self, x: &Mat, y: &Mat, opt: &mut AdamW, lr: f64) -> f64 {
        self.ml_step_named(x, y, opt, lr, "vclub")
    }

    /// As [`ml_step`](Self::ml_step), with optimizer state stored under
    /// `prefix` so several estimators can share one optimizer.
    pub fn ml_step_named(&mut self, x: &Mat, y: &Mat, opt: &mut AdamW, lr: f64, prefix: &str) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let ll = loglik_graph(&mut g, self, prefix, xv, yv);
        let neg = g.scale(ll, -1.0);
        g.backward(neg);
        let grads = g.param_grads();
        opt.step(self, prefix, &grads, lr);
        g.scalar(ll)
    }

    /// Fit by `steps` full-batch maximum-likelihood updates.
    pub fn fit(&mut self, x: &Mat, y: &Mat, steps: usize, lr: f64) -> f64 {
        let mut opt = AdamW::new(0.0);
        let mut ll = f64::NEG_INFINITY;
        for _ in 0..steps {
            ll = self.ml_step(x, y, &mut opt, lr);
        }
        ll
    }

    fn check(&self, x: &FeatureBatch, y: &FeatureBatch) -> Result<()> {
        if x.len() != y.len() {
            return Err(GeoLinkError::DimMismatch(format!("{} vs {} samples", x.len(), y.len())));
        }
        if x.dim() != self.mean_map.fc1.in_dim() || y.dim() != self.mean_map.fc2.out_dim() {
            return Err(GeoLinkError::DimMismatch(format!(
                "estimator maps {}→{}, got {}→{}",
                self.mean_map.fc1.in_dim(),
                self.mean_map.fc2.out_dim(),
                x.dim(),
                y.dim()
            )));
        }
        Ok(())
    }
}

impl Parameterized for VClubEstimator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.mean_map.visit(&format!("{prefix}.mean_map"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.mean_map.visit_mut(&format!("{prefix}.mean_map"), f);
    }
}

/// Mean Gaussian log-likelihood `−½·mean_i ‖y_i − μ(x_i)‖²`.
pub fn loglik_graph(g: &mut Graph, est: &VClubEstimator, prefix: &str, x: Var, y: Var) -> Var {
    let n = g.value(x).nrows() as f64;
    let mu = est.mean_map.forward(g, &format!("{prefix}.mean_map"), x);
    let diff = g.sub(y, mu);
    let sq = g.mul(diff, diff);
    let total = g.sum(sq);
    g.scale(total, -0.5 / n)
}

/// Sample vCLUB estimate
/// `mean_i log v(y_i|x_i) − mean_{i,j} log v(y_j|x_i)`.
///
/// The all-pairs mean is expanded as
/// `mean‖y‖² + mean‖μ‖² − 2·ȳ·μ̄`, which keeps the cost linear in the batch.
pub fn mi_upper_graph(g: &mut Graph, est: &VClubEstimator, prefix: &str, x: Var, y: Var) -> Var {
    let n = g.value(x).nrows() as f64;
    let mu = est.mean_map.forward(g, &format!("{prefix}.mean_map"), x);

    let diff = g.sub(y, mu);
    let sq = g.mul(diff, diff);
    let paired = g.sum(sq);
    let paired = g.scale(paired, 1.0 / n);

    let yy = g.mul(y, y);
    let yy = g.sum(yy);
    let mm = g.mul(mu, mu);
    let mm = g.sum(mm);
    let y_bar = g.col_mean(y);
    let mu_bar = g.col_mean(mu);
    let cross = g.mul(y_bar, mu_bar);
    let cross = g.sum(cross);
    let norms = g.add(yy, mm);
    let norms = g.scale(norms, 1.0 / n);
    let cross = g.scale(cross, -2.0);
    let all_pairs = g.add(norms, cross);

    // −½·paired − (−½·all_pairs)
    let gap = g.sub(all_pairs, paired);
    g.scale(gap, 0.5)
}

fn eval<F>(x: &FeatureBatch, y: &FeatureBatch, f: F) -> f64
where
    F: FnOnce(&mut Graph, Var, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.constant(x.values.clone());
    let yv = g.constant(y.values.clone());
    let out = f(&mut g, xv, yv);
    g.scalar(out)
}

/// Estimator-fitting objective (to be maximized).
pub fn vclub_loglik(est: &VClubEstimator, f_pc: &FeatureBatch, f_view: &FeatureBatch) -> Result<f64> {
    est.check(f_pc, f_view)?;
    Ok(eval(f_pc, f_view, |g, x, y| loglik_graph(g, est, "vclub", x, y)))
}

/// vCLUB estimate of `I(f_pc; f_view)` with the estimator held fixed.
pub fn vclub_mi_upper(est: &VClubEstimator, f_pc: &FeatureBatch, f_view: &FeatureBatch) -> Result<f64> {
    est.check(f_pc, f_view)?;
    if f_pc.len() < 2 {
        return Err(GeoLinkError::BatchTooSmall(f_pc.len()));
    }
    Ok(eval(f_pc, f_view, |g, x, y| mi_upper_graph(g, est, "vclub", x, y)))
}

/// `I_vCLUB(F_pc'; F_dro) + I_vCLUB(F_pc'; F_sat)`.
pub fn geometric_refine_loss(
    est_drone: &VClubEstimator,
    est_satellite: &VClubEstimator,
    f_dro: &FeatureBatch,
    f_sat: &FeatureBatch,
    f_pc: &FeatureBatch,
) -> Result<f64> {
    f_pc.check_aligned(f_dro)?;
    f_pc.check_aligned(f_sat)?;
    check_pair(f_pc, f_pc)?;
    Ok(vclub_mi_upper(est_drone, f_pc, f_dro)? + vclub_mi_upper(est_satellite, f_pc, f_sat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ViewTag;
    use crate::nn::Linear;
    use ndarray::Array2;
    use rand::Rng;

    fn fb(v: Mat, tag: ViewTag) -> FeatureBatch {
        FeatureBatch::unlabelled(v, tag).unwrap()
    }

    /// Mean map `x ↦ x`: gelu(a) − gelu(−a) = a for the tanh form, so a ±I
    /// pair in the first layer recombined in the second is exact.
    fn identity_estimator(d: usize) -> VClubEstimator {
        let mut w1 = Array2::zeros((d, 2 * d));
        let mut w2 = Array2::zeros((2 * d, d));
        for i in 0..d {
            w1[[i, i]] = 1.0;
            w1[[i, d + i]] = -1.0;
            w2[[i, i]] = 1.0;
            w2[[d + i, i]] = -1.0;
        }
        VClubEstimator {
            mean_map: Mlp {
                fc1: Linear { weight: w1, bias: Array2::zeros((1, 2 * d)) },
                fc2: Linear { weight: w2, bias: Array2::zeros((1, d)) },
            },
        }
    }

    fn zero_estimator(dx: usize, dy: usize) -> VClubEstimator {
        let mut e = VClubEstimator::new(dx, dy, 4, 0).unwrap();
        e.visit_mut("", &mut |_, m| m.fill(0.0));
        e
    }

    fn random(seed: u64, r: usize, c: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn perfect_predictor_has_zero_loglik() {
        let e = identity_estimator(3);
        let x = random(0, 5, 3);
        let ll = vclub_loglik(&e, &fb(x.clone(), ViewTag::Pointcloud), &fb(x, ViewTag::Drone)).unwrap();
        assert!(ll.abs() < 1e-24, "{ll}");
    }

    #[test]
    fn zero_mean_unit_targets_give_minus_half() {
        let e = zero_estimator(3, 4);
        let mut y = random(1, 6, 4);
        for mut r in y.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        let ll = vclub_loglik(&e, &fb(random(2, 6, 3), ViewTag::Pointcloud), &fb(y, ViewTag::Drone)).unwrap();
        assert!((ll + 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_relation_gives_positive_bound() {
        let e = identity_estimator(2);
        let x = random(3, 8, 2);
        let mi = vclub_mi_upper(&e, &fb(x.clone(), ViewTag::Pointcloud), &fb(x, ViewTag::Drone)).unwrap();
        assert!(mi > 0.0);
    }

    #[test]
    fn expansion_matches_double_loop() {
        let e = VClubEstimator::new(3, 2, 5, 7).unwrap();
        let x = random(4, 6, 3);
        let y = random(5, 6, 2);
        let mu = e.predict(&x);
        let logv = |i: usize, j: usize| -> f64 {
            -0.5 * (0..2).map(|d| (y[[j, d]] - mu[[i, d]]).powi(2)).sum::<f64>()
        };
        let pos: f64 = (0..6).map(|i| logv(i, i)).sum::<f64>() / 6.0;
        let neg: f64 = (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| logv(i, j)).sum::<f64>() / 36.0;
        let got = vclub_mi_upper(&e, &fb(x, ViewTag::Pointcloud), &fb(y, ViewTag::Drone)).unwrap();
        assert!((got - (pos - neg)).abs() < 1e-12);
    }

    #[test]
    fn refine_loss_is_sum_of_terms() {
        let ed = VClubEstimator::new(3, 3, 4, 1).unwrap();
        let es = VClubEstimator::new(3, 3, 4, 2).unwrap();
        let p = fb(random(6, 5, 3), ViewTag::Pointcloud);
        let d = fb(random(7, 5, 3), ViewTag::Drone);
        let s = fb(random(8, 5, 3), ViewTag::Satellite);
        let want = vclub_mi_upper(&ed, &p, &d).unwrap() + vclub_mi_upper(&es, &p, &s).unwrap();
        assert!((geometric_refine_loss(&ed, &es, &d, &s, &p).unwrap() - want).abs() < 1e-15);
        let twice = geometric_refine_loss(&ed, &ed, &d, &d, &p).unwrap();
        assert!((twice - 2.0 * vclub_mi_upper(&ed, &p, &d).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn constant_mean_estimate_is_exactly_zero() {
        // μ(x) = c for every x: paired and all-pairs terms coincide.
        let mut e = zero_estimator(2, 3);
        e.mean_map.fc2.bias = Array2::from_shape_vec((1, 3), vec![0.1, -0.3, 0.2]).unwrap();
        let x = random(9, 7, 2);
        let y = random(10, 7, 3);
        let mi = vclub_mi_upper(&e, &fb(x, ViewTag::Pointcloud), &fb(y, ViewTag::Drone)).unwrap();
        assert!(mi.abs() < 1e-12, "{mi}");
    }

    fn gaussian_pairs(seed: u64, n: usize, rho: f64) -> (Mat, Mat) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 1));
        let mut y = Array2::zeros((n, 1));
        for i in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            x[[i, 0]] = a;
            y[[i, 0]] = rho * a + (1.0 - rho * rho).sqrt() * b;
        }
        (x, y)
    }

    /// Per-sample terms `log v(y_i|x_i) − mean_j log v(y_j|x_i)` by brute force
    /// over a subsample of anchors, for a standard-error estimate.
    fn sample_terms(e: &VClubEstimator, x: &Mat, y: &Mat) -> Vec<f64> {
        let mu = e.predict(x);
        let n = x.nrows();
        let ys: Vec<f64> = y.column(0).to_vec();
        (0..n)
            .map(|i| {
                let m = mu[[i, 0]];
                let pos = -0.5 * (ys[i] - m).powi(2);
                let neg = ys.iter().map(|yj| -0.5 * (yj - m).powi(2)).sum::<f64>() / n as f64;
                pos - neg
            })
            .collect()
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn independent_pairs_estimate_near_zero() {
        let (x, _) = gaussian_pairs(20, 10_000, 0.0);
        let (_, y) = gaussian_pairs(21, 10_000, 0.0);
        let mut e = VClubEstimator::new(1, 1, 16, 3).unwrap();
        e.fit(&x, &y, 300, 0.01);
        let mi = vclub_mi_upper(&e, &fb(x.clone(), ViewTag::Pointcloud), &fb(y.clone(), ViewTag::Drone)).unwrap();
        let (m, se) = mean_se(&sample_terms(&e, &x, &y));
        assert!((mi - m).abs() < 1e-9);
        assert!(mi.abs() < 3.0 * se + 1e-3, "estimate {mi}, se {se}");
    }

    #[test]
    fn gaussian_estimate_bounds_true_information() {
        let rho: f64 = 0.8;
        let truth = -0.5 * (1.0 - rho * rho).ln();
        let (x, y) = gaussian_pairs(22, 10_000, rho);
        let mut e = VClubEstimator::new(1, 1, 16, 4).unwrap();
        e.fit(&x, &y, 400, 0.01);
        let mi = vclub_mi_upper(&e, &fb(x.clone(), ViewTag::Pointcloud), &fb(y.clone(), ViewTag::Drone)).unwrap();
        let (_, se) = mean_se(&sample_terms(&e, &x, &y));
        assert!(mi + 2.0 * se >= truth, "estimate {mi} ± {se} vs {truth}");
    }

    #[test]
    fn loglik_gradient_matches_finite_differences() {
        let mut e = VClubEstimator::new(3, 2, 5, 8).unwrap();
        let x = random(11, 6, 3);
        let y = random(12, 6, 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let ll = loglik_graph(&mut g, &e, "vclub", xv, yv);
        g.backward(ll);
        let grads = g.param_grads();
        let value = |e: &VClubEstimator| {
            vclub_loglik(e, &fb(x.clone(), ViewTag::Pointcloud), &fb(y.clone(), ViewTag::Drone)).unwrap()
        };
        let mut names = Vec::new();
        e.visit("vclub", &mut |n, m| names.push((n, m.dim())));
        for (name, (r, c)) in names {
            for i in 0..r {
                for j in 0..c {
                    let h = 1e-6;
                    let bump = |e: &mut VClubEstimator, delta: f64| {
                        e.visit_mut("vclub", &mut |n, m| {
                            if n == name {
                                m[[i, j]] += delta;
                            }
                        })
                    };
                    bump(&mut e, h);
                    let up = value(&e);
                    bump(&mut e, -2.0 * h);
                    let down = value(&e);
                    bump(&mut e, h);
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[&name][[i, j]];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{name}[{i},{j}]: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_dims() {
        let e = VClubEstimator::new(3, 3, 4, 1).unwrap();
        let p = fb(random(6, 5, 2), ViewTag::Pointcloud);
        let d = fb(random(7, 5, 3), ViewTag::Drone);
        assert!(matches!(vclub_loglik(&e, &p, &d), Err(GeoLinkError::DimMismatch(_))));
    }
}
