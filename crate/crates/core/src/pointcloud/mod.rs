//! Parameter-free point-cloud encoder.
//!
//! A cloud is normalized into the unit ball, put into a canonical point
//! order, and pushed through a pyramid of farthest-point-sampling, k-nearest
//! neighbour grouping and max/mean pooling stages. Every stage halves the
//! point count and doubles the feature width; a final global max/mean pool
//! gives one vector per scene. Nothing here is trained.

mod embed;
mod encoder;
pub mod io;
mod sampling;

use std::cmp::Ordering;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{GeoLinkError, Result};

pub use embed::pose_embed;
pub use encoder::{encode_pointcloud, encode_stage, initial_stage, EncoderConfig, PyramidStage};
pub use sampling::{farthest_point_sampling, knn_group};

/// An `M×3` set of scene coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Mat,
    pub scene_id: String,
}

impl PointCloud {
    pub fn new(points: Mat, scene_id: impl Into<String>) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(GeoLinkError::ShapeError(format!(
                "point cloud must have 3 columns, got {}",
                points.ncols()
            )));
        }
        if points.nrows() == 0 {
            return Err(GeoLinkError::ShapeError("point cloud is empty".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(GeoLinkError::NonFinite("point cloud"));
        }
        Ok(Self {
            points,
            scene_id: scene_id.into(),
        })
    }

    pub fn from_points(points: &[[f64; 3]], scene_id: impl Into<String>) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let m = Array2::from_shape_vec((points.len(), 3), flat)
            .map_err(|e| GeoLinkError::ShapeError(e.to_string()))?;
        Self::new(m, scene_id)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn centroid(&self) -> [f64; 3] {
        let c = self.points.mean_axis(Axis(0)).expect("non-empty cloud");
        [c[0], c[1], c[2]]
    }
}

/// Center on the centroid and scale so the farthest point has norm 1.
///
/// A cloud whose points all coincide maps to all zeros.
pub fn normalize_cloud(pc: &PointCloud) -> Result<PointCloud> {
    if pc.points.iter().any(|v| !v.is_finite()) {
        return Err(GeoLinkError::NonFinite("point cloud"));
    }
    let centroid = pc
        .points
        .mean_axis(Axis(0))
        .ok_or_else(|| GeoLinkError::ShapeError("point cloud is empty".into()))?;
    let mut centered = &pc.points - &centroid.insert_axis(Axis(0));
    let scale = centered
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0_f64, f64::max);
    if scale > 0.0 {
        centered /= scale;
    } else {
        centered.fill(0.0);
    }
    Ok(PointCloud {
        points: centered,
        scene_id: pc.scene_id.clone(),
    })
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Points reordered lexicographically by `(x, y, z)`.
pub fn canonical_order(points: &Mat) -> Mat {
    let mut rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|a, b| lexicographic(a, b));
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec(points.dim(), flat).expect("same shape")
}

/// Bring a cloud to exactly `n` points: farthest-point subsampling when it
/// has more, padding with copies of the centroid when it has fewer. The
/// boolean reports whether padding happened.
pub fn fit_to_count(pc: &PointCloud, n: usize) -> Result<(PointCloud, bool)> {
    let m = pc.len();
    match m.cmp(&n) {
        Ordering::Equal => Ok((pc.clone(), false)),
        Ordering::Greater => {
            let ordered = canonical_order(&pc.points);
            let idx = farthest_point_sampling(&ordered, n, 0)?;
            let points = ordered.select(Axis(0), &idx);
            Ok((PointCloud::new(points, pc.scene_id.clone())?, false))
        }
        Ordering::Less => {
            let c = pc.centroid();
            let mut points = Array2::zeros((n, 3));
            points.slice_mut(ndarray::s![..m, ..]).assign(&pc.points);
            for mut row in points.rows_mut().into_iter().skip(m) {
                row[0] = c[0];
                row[1] = c[1];
                row[2] = c[2];
            }
            Ok((PointCloud::new(points, pc.scene_id.clone())?, true))
        }
    }
}
