use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{canonical_order, farthest_point_sampling, fit_to_count, knn_group, normalize_cloud};
use super::{pose_embed, PointCloud};
use crate::autodiff::Mat;
use crate::error::{GeoLinkError, Result};
use crate::instrument;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_stages: usize,
    pub k_neighbors: usize,
    /// Width of the stage-0 position embedding; must be a multiple of 6.
    pub initial_dim: usize,
    pub pose_alpha: f64,
    pub pose_beta: f64,
    pub num_points: usize,
    /// When set, each stage starts FPS from a seeded random point instead of
    /// the canonical first point.
    pub random_start_seed: Option<u64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            k_neighbors: 16,
            initial_dim: 72,
            pose_alpha: 1000.0,
            pose_beta: 100.0,
            num_points: 1024,
            random_start_seed: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 || self.k_neighbors == 0 {
            return Err(GeoLinkError::ConfigError(
                "encoder needs at least one stage and one neighbour".into(),
            ));
        }
        if self.initial_dim == 0 || self.initial_dim % 6 != 0 {
            return Err(GeoLinkError::BadDim(self.initial_dim));
        }
        let required = 1usize << self.num_stages;
        if self.num_points < required {
            return Err(GeoLinkError::TooFewPoints {
                num_points: self.num_points,
                stages: self.num_stages,
                required,
            });
        }
        Ok(())
    }

    /// Length of the global feature: concatenated max and mean pool of the
    /// last stage.
    pub fn output_dim(&self) -> usize {
        2 * self.initial_dim << self.num_stages
    }

    /// The encoder has no trainable parameters.
    pub fn parameter_count(&self) -> usize {
        0
    }

    /// Stable identifier for caching encoded clouds.
    pub fn fingerprint(&self) -> String {
        crate::short_hash(&serde_json::to_string(self).expect("serializable"))
    }
}

/// Coordinates and per-point features at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidStage {
    pub coords: Mat,
    pub feats: Mat,
    pub stage_index: usize,
}

/// Stage 0: the coordinates with their position embedding as features.
pub fn initial_stage(coords: Mat, cfg: &EncoderConfig) -> Result<PyramidStage> {
    let feats = pose_embed(&coords, cfg.initial_dim, cfg.pose_alpha, cfg.pose_beta)?;
    Ok(PyramidStage {
        coords,
        feats,
        stage_index: 0,
    })
}

/// One FPS → kNN → pool step: halves the points, doubles the width.
///
/// Each sampled center gathers its `k` nearest points of the current stage
/// (`k` is capped at the stage size). A neighbour contributes its feature plus
/// the position embedding of its offset from the center; the center's new
/// feature is `[max over neighbours | mean over neighbours]`.
pub fn encode_stage(stage: &PyramidStage, cfg: &EncoderConfig) -> Result<PyramidStage> {
    let m = stage.coords.nrows();
    if m < 2 {
        return Err(GeoLinkError::ShapeError(format!(
            "stage {} has {m} points, at least 2 are required",
            stage.stage_index
        )));
    }
    if stage.feats.nrows() != m {
        return Err(GeoLinkError::DimMismatch(format!(
            "{} coordinates but {} feature rows",
            m,
            stage.feats.nrows()
        )));
    }
    let width = stage.feats.ncols();
    let out_points = m.div_ceil(2);
    let start = match cfg.random_start_seed {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed ^ stage.stage_index as u64).random_range(0..m),
        None => 0,
    };
    let centers = farthest_point_sampling(&stage.coords, out_points, start)?;
    let center_coords = stage.coords.select(Axis(0), &centers);
    let k = cfg.k_neighbors.min(m);
    let neighbours = knn_group(&center_coords, &stage.coords, k)?;

    let mut feats = Array2::zeros((out_points, 2 * width));
    let mut offsets = Array2::zeros((k, 3));
    for (ci, nbrs) in neighbours.rows().into_iter().enumerate() {
        let c = center_coords.row(ci);
        for (slot, &j) in nbrs.iter().enumerate() {
            let p = stage.coords.row(j);
            for a in 0..3 {
                offsets[[slot, a]] = p[a] - c[a];
            }
        }
        let rel = pose_embed(&offsets, width, cfg.pose_alpha, cfg.pose_beta)?;
        let mut max = Array1::from_elem(width, f64::NEG_INFINITY);
        let mut sum = Array1::<f64>::zeros(width);
        for (slot, &j) in nbrs.iter().enumerate() {
            let g = &stage.feats.row(j) + &rel.row(slot);
            max.zip_mut_with(&g, |m, &v| *m = m.max(v));
            sum += &g;
        }
        let mean = sum / k as f64;
        let mut row = feats.row_mut(ci);
        row.slice_mut(ndarray::s![..width]).assign(&max);
        row.slice_mut(ndarray::s![width..]).assign(&mean);
    }
    Ok(PyramidStage {
        coords: center_coords,
        feats,
        stage_index: stage.stage_index + 1,
    })
}

/// Run the whole pyramid and return every stage, the input stage first.
pub fn encode_pyramid(pc: &PointCloud, cfg: &EncoderConfig) -> Result<Vec<PyramidStage>> {
    cfg.validate()?;
    let ordered = PointCloud::new(canonical_order(&pc.points), pc.scene_id.clone())?;
    let normalized = normalize_cloud(&ordered)?;
    let (fitted, _) = fit_to_count(&normalized, cfg.num_points)?;
    let mut stages = vec![initial_stage(canonical_order(&fitted.points), cfg)?];
    for _ in 0..cfg.num_stages {
        let next = encode_stage(stages.last().expect("non-empty"), cfg)?;
        stages.push(next);
    }
    Ok(stages)
}

/// Global feature of a point cloud (length [`EncoderConfig::output_dim`]).
pub fn encode_pointcloud(pc: &PointCloud, cfg: &EncoderConfig) -> Result<Array1<f64>> {
    instrument::record_pointcloud_encode();
    let stages = encode_pyramid(pc, cfg)?;
    let last = &stages.last().expect("non-empty").feats;
    let max = last.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
    let mean = last.mean_axis(Axis(0)).expect("non-empty stage");
    Ok(concatenate(Axis(0), &[max.view(), mean.view()]).expect("1-d concat"))
}
