//! Area-weighted surface sampling of a layout.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};

use super::{SceneSpec, Shape};
use crate::error::{GeoLinkError, Result};
use crate::pointcloud::PointCloud;

/// One planar or curved patch of a shape, sampled uniformly.
#[derive(Clone, Copy)]
enum Patch {
    /// Axis-aligned rectangle with `axis` fixed at `level`.
    Rect { axis: usize, level: f64, lo: [f64; 2], hi: [f64; 2] },
    Disk { center: [f64; 2], radius: f64, z: f64 },
    Tube { center: [f64; 2], radius: f64, height: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Rect { lo, hi, .. } => (hi[0] - lo[0]) * (hi[1] - lo[1]),
            Patch::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
            Patch::Tube { radius, height, .. } => std::f64::consts::TAU * radius * height,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        match *self {
            Patch::Rect { axis, level, lo, hi } => {
                let u = rng.random_range(lo[0]..=hi[0]);
                let v = rng.random_range(lo[1]..=hi[1]);
                // the two free axes in increasing order
                let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
                let mut p = [0.0; 3];
                p[axis] = level;
                p[free[0]] = u;
                p[free[1]] = v;
                p
            }
            Patch::Disk { center, radius, z } => {
                let r = radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [center[0] + r * a.cos(), center[1] + r * a.sin(), z]
            }
            Patch::Tube { center, radius, height } => {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [center[0] + radius * a.cos(), center[1] + radius * a.sin(), rng.random_range(0.0..=height)]
            }
        }
    }
}

fn patches(shape: &Shape) -> Vec<Patch> {
    match *shape {
        Shape::Box { center, half, height } => {
            let (x0, x1) = (center[0] - half[0], center[0] + half[0]);
            let (y0, y1) = (center[1] - half[1], center[1] + half[1]);
            vec![
                Patch::Rect { axis: 2, level: 0.0, lo: [x0, y0], hi: [x1, y1] },
                Patch::Rect { axis: 2, level: height, lo: [x0, y0], hi: [x1, y1] },
                Patch::Rect { axis: 0, level: x0, lo: [y0, 0.0], hi: [y1, height] },
                Patch::Rect { axis: 0, level: x1, lo: [y0, 0.0], hi: [y1, height] },
                Patch::Rect { axis: 1, level: y0, lo: [x0, 0.0], hi: [x1, height] },
                Patch::Rect { axis: 1, level: y1, lo: [x0, 0.0], hi: [x1, height] },
            ]
        }
        Shape::Cylinder { center, radius, height } => vec![
            Patch::Disk { center, radius, z: 0.0 },
            Patch::Disk { center, radius, z: height },
            Patch::Tube { center, radius, height },
        ],
    }
}

/// `n` points drawn uniformly by area from every object surface.
pub fn sample_pointcloud(spec: &SceneSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(GeoLinkError::ConfigError("point count must be ≥ 1".into()));
    }
    let all: Vec<Patch> = spec.layout.iter().flat_map(|o| patches(&o.shape)).collect();
    if all.is_empty() {
        return Err(GeoLinkError::ConfigError(format!("scene {} has no objects", spec.scene_id)));
    }
    let weights = WeightedIndex::new(all.iter().map(Patch::area))
        .map_err(|e| GeoLinkError::ConfigError(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Array2::zeros((n, 3));
    for mut row in pts.rows_mut() {
        let p = all[weights.sample(&mut rng)].sample(&mut rng);
        row.assign(&ndarray::arr1(&p));
    }
    PointCloud::new(pts, spec.scene_id.clone())
}

/// Distance from `p` to the surface of `shape`.
pub fn distance_to_surface(shape: &Shape, p: [f64; 3]) -> f64 {
    match *shape {
        Shape::Box { center, half, height } => {
            let lo = [center[0] - half[0], center[1] - half[1], 0.0];
            let hi = [center[0] + half[0], center[1] + half[1], height];
            let outside: f64 = (0..3)
                .map(|a| (lo[a] - p[a]).max(p[a] - hi[a]).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt();
            if outside > 0.0 {
                outside
            } else {
                (0..3).map(|a| (p[a] - lo[a]).min(hi[a] - p[a])).fold(f64::INFINITY, f64::min)
            }
        }
        Shape::Cylinder { center, radius, height } => {
            let radial = (p[0] - center[0]).hypot(p[1] - center[1]) - radius;
            let vertical = (-p[2]).max(p[2] - height);
            if radial <= 0.0 && vertical <= 0.0 {
                (-radial).min(-vertical)
            } else {
                (radial.max(0.0).powi(2) + vertical.max(0.0).powi(2)).sqrt()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{scene_spec, DomainStyle, SceneObject};
    use super::*;

    fn min_distance(spec: &SceneSpec, p: [f64; 3]) -> f64 {
        spec.layout
            .iter()
            .map(|o| distance_to_surface(&o.shape, p))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn unit_box_points_on_faces() {
        let mut spec = scene_spec(0, "u", &DomainStyle::source());
        spec.layout = vec![SceneObject {
            shape: Shape::Box { center: [0.0, 0.0], half: [0.5, 0.5], height: 1.0 },
            palette_index: 0,
        }];
        let pc = sample_pointcloud(&spec, 2000, 1).unwrap();
        let mut per_face = [0usize; 6];
        for r in pc.points.rows() {
            let p = [r[0], r[1], r[2]];
            assert!(min_distance(&spec, p) <= 1e-6);
            let faces = [p[2], 1.0 - p[2], p[0] + 0.5, 0.5 - p[0], p[1] + 0.5, 0.5 - p[1]];
            let f = (0..6).min_by(|&a, &b| faces[a].abs().total_cmp(&faces[b].abs())).unwrap();
            per_face[f] += 1;
        }
        // equal areas: each face near 1/6
        assert!(per_face.iter().all(|&c| (230..=440).contains(&c)), "{per_face:?}");
    }

    #[test]
    fn random_scenes_on_surface() {
        for i in 0..10 {
            let spec = scene_spec(7, &format!("s{i}"), &DomainStyle::source());
            let pc = sample_pointcloud(&spec, 300, i).unwrap();
            for r in pc.points.rows() {
                assert!(min_distance(&spec, [r[0], r[1], r[2]]) <= 1e-6);
            }
        }
    }

    #[test]
    fn single_point() {
        let spec = scene_spec(1, "one", &DomainStyle::source());
        let pc = sample_pointcloud(&spec, 1, 0).unwrap();
        assert_eq!(pc.len(), 1);
        let r = pc.points.row(0);
        assert!(min_distance(&spec, [r[0], r[1], r[2]]) <= 1e-6);
    }

    #[test]
    fn seeds_differ_but_bounds_agree() {
        let spec = scene_spec(2, "b", &DomainStyle::source());
        let a = sample_pointcloud(&spec, 4000, 1).unwrap();
        let b = sample_pointcloud(&spec, 4000, 2).unwrap();
        assert_ne!(a.points, b.points);
        let bounds = |pc: &PointCloud| -> Vec<f64> {
            (0..3)
                .flat_map(|c| {
                    let col = pc.points.column(c);
                    [col.fold(f64::INFINITY, |m, &v| m.min(v)), col.fold(f64::NEG_INFINITY, |m, &v| m.max(v))]
                })
                .collect()
        };
        for (x, y) in bounds(&a).iter().zip(bounds(&b)) {
            assert!((x - y).abs() < 0.02, "{x} vs {y}");
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for o in &spec.layout {
            let (l, h) = o.shape.footprint();
            for k in 0..2 {
                lo[k] = lo[k].min(l[k]);
                hi[k] = hi[k].max(h[k]);
            }
        }
        let ba = bounds(&a);
        assert!(ba[0] >= lo[0] - 1e-9 && ba[1] <= hi[0] + 1e-9);
        assert!(ba[2] >= lo[1] - 1e-9 && ba[3] <= hi[1] + 1e-9);
    }
}
