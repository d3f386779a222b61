use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1};

use crate::autodiff::Mat;
use crate::error::{GeoLinkError, Result};

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest point sampling starting from `start_index`.
///
/// Each pick maximizes the distance to the nearest already-selected point;
/// ties go to the lowest index.
pub fn farthest_point_sampling(points: &Mat, m: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if m == 0 || m > n {
        return Err(GeoLinkError::BadSampleCount {
            requested: m,
            available: n,
        });
    }
    if start_index >= n {
        return Err(GeoLinkError::ShapeError(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = points.row(current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = sq_dist(points.row(i), c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Indices of the `k` nearest `references` for every query row, nearest
/// first, ties broken by lowest index.
pub fn knn_group(queries: &Mat, references: &Mat, k: usize) -> Result<Array2<usize>> {
    let n = references.nrows();
    if k > n || k == 0 {
        return Err(GeoLinkError::BadK { k, available: n });
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    let mut out = Array2::zeros((queries.nrows(), k));
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (qi, q) in queries.rows().into_iter().enumerate() {
        scratch.clear();
        scratch.extend(
            references
                .rows()
                .into_iter()
                .enumerate()
                .map(|(j, r)| (sq_dist(q, r), j)),
        );
        if k < n {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        for (slot, &(_, j)) in head.iter().enumerate() {
            out[[qi, slot]] = j;
        }
    }
    Ok(out)
}
