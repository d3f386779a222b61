use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{GeoLinkError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Drone,
    Satellite,
    Pointcloud,
}

/// `B×D` embeddings of one view, one row per scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    pub values: Mat,
    pub view_tag: ViewTag,
    pub scene_ids: Vec<String>,
}

impl FeatureBatch {
    pub fn new(values: Mat, view_tag: ViewTag, scene_ids: Vec<String>) -> Result<Self> {
        if scene_ids.len() != values.nrows() {
            return Err(GeoLinkError::DimMismatch(format!(
                "{} scene ids for {} rows",
                scene_ids.len(),
                values.nrows()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeoLinkError::NonFinite("feature batch"));
        }
        Ok(Self {
            values,
            view_tag,
            scene_ids,
        })
    }

    /// Rows labelled `0..B` in order.
    pub fn unlabelled(values: Mat, view_tag: ViewTag) -> Result<Self> {
        let ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        Self::new(values, view_tag, ids)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Both batches describe the same scenes in the same order.
    pub fn check_aligned(&self, other: &FeatureBatch) -> Result<()> {
        if self.len() != other.len() {
            return Err(GeoLinkError::DimMismatch(format!(
                "batch sizes {} and {}",
                self.len(),
                other.len()
            )));
        }
        match self
            .scene_ids
            .iter()
            .zip(&other.scene_ids)
            .position(|(a, b)| a != b)
        {
            Some(row) => Err(GeoLinkError::AlignmentError {
                row,
                left: self.scene_ids[row].clone(),
                right: other.scene_ids[row].clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Scale every row to unit length.
pub fn l2_normalize(features: &FeatureBatch) -> Result<FeatureBatch> {
    let mut values = features.values.clone();
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(GeoLinkError::ZeroVector(i));
        }
        row /= n;
    }
    Ok(FeatureBatch {
        values,
        view_tag: features.view_tag,
        scene_ids: features.scene_ids.clone(),
    })
}
