use ndarray::Array2;

use crate::autodiff::Mat;
use crate::error::{GeoLinkError, Result};

/// Trigonometric position embedding of `n×3` coordinates into `n×dim`.
///
/// Each axis gets `dim/3` channels: `dim/6` sines followed by `dim/6`
/// cosines of `alpha·c / beta^(6j/dim)`, `j = 0..dim/6`. Axis blocks are laid
/// out x, y, z.
pub fn pose_embed(coords: &Mat, dim: usize, alpha: f64, beta: f64) -> Result<Mat> {
    if dim == 0 || dim % 6 != 0 {
        return Err(GeoLinkError::BadDim(dim));
    }
    if coords.ncols() != 3 {
        return Err(GeoLinkError::ShapeError(format!(
            "expected n×3 coordinates, got {} columns",
            coords.ncols()
        )));
    }
    let per_axis = dim / 3;
    let half = dim / 6;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| 1.0 / beta.powf(6.0 * j as f64 / dim as f64))
        .collect();
    let mut out = Array2::zeros((coords.nrows(), dim));
    for (i, p) in coords.rows().into_iter().enumerate() {
        for axis in 0..3 {
            let base = axis * per_axis;
            let scaled = alpha * p[axis];
            for (j, f) in inv_freq.iter().enumerate() {
                let phase = scaled * f;
                out[[i, base + j]] = phase.sin();
                out[[i, base + half + j]] = phase.cos();
            }
        }
    }
    Ok(out)
}
