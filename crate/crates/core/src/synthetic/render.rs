//! Orthographic ray caster. Each pixel shoots a parallel ray and takes the
//! colour of the nearest object surface, or the ground. Faces get a fixed
//! tint by orientation so that structure is visible without lighting.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SceneSpec, Shape, HALF_GROUND};
use crate::error::{GeoLinkError, Result};
use crate::image_encoder::Image;

/// Angles in degrees. `height` scales the visible window; 1.0 frames the
/// ground square with a small margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub height: f64,
}

impl Camera {
    pub fn satellite() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 90.0,
            height: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.elevation > 0.0
            && self.elevation <= 90.0
            && self.height > 0.0
            && self.azimuth.is_finite()
            && self.height.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeoLinkError::BadCamera(format!(
                "elevation must be in (0, 90] and height positive, got {self:?}"
            )))
        }
    }
}

type V3 = [f64; 3];

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn at(o: V3, d: V3, t: f64) -> V3 {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

/// Nearest hit `(t, outward normal)` of a ray with one shape.
fn intersect(shape: &Shape, o: V3, d: V3) -> Option<(f64, V3)> {
    match *shape {
        Shape::Box { center, half, height } => {
            let lo = [center[0] - half[0], center[1] - half[1], 0.0];
            let hi = [center[0] + half[0], center[1] + half[1], height];
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut normal = [0.0; 3];
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        return None;
                    }
                    continue;
                }
                let (t1, t2) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                let (ta, tb, sign) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                if ta > t_near {
                    t_near = ta;
                    normal = [0.0; 3];
                    normal[a] = sign;
                }
                t_far = t_far.min(tb);
            }
            (t_near <= t_far && t_near > 0.0).then_some((t_near, normal))
        }
        Shape::Cylinder { center, radius, height } => {
            let mut best: Option<(f64, V3)> = None;
            let mut consider = |t: f64, n: V3| {
                if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, n));
                }
            };
            if d[2].abs() > 1e-12 {
                let t = (height - o[2]) / d[2];
                let p = at(o, d, t);
                if (p[0] - center[0]).hypot(p[1] - center[1]) <= radius {
                    consider(t, [0.0, 0.0, 1.0]);
                }
            }
            let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
            let a = d[0] * d[0] + d[1] * d[1];
            if a > 1e-12 {
                let b = 2.0 * (ox * d[0] + oy * d[1]);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let p = at(o, d, t);
                    if (0.0..=height).contains(&p[2]) {
                        consider(t, [(p[0] - center[0]) / radius, (p[1] - center[1]) / radius, 0.0]);
                    }
                }
            }
            best
        }
    }
}

fn face_tint(n: V3) -> f64 {
    if n[2] > 0.5 {
        1.0
    } else {
        0.62 + 0.18 * n[0] + 0.08 * n[1]
    }
}

fn stripes(p: V3, freq: f64) -> f64 {
    1.0 + 0.18 * (std::f64::consts::TAU * freq * (p[0] + 0.7 * p[1] + 1.3 * p[2])).sin()
}

/// Render a `3×side×side` image. Pixel values are rounded through `f32`,
/// so images survive the raw-tensor container bit for bit.
pub fn render_view(spec: &SceneSpec, camera: &Camera, side: usize) -> Result<Image> {
    camera.validate()?;
    if side == 0 {
        return Err(GeoLinkError::BadCamera("image side must be positive".into()));
    }
    let (az, el) = (camera.azimuth.to_radians(), camera.elevation.to_radians());
    let toward_camera = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
    let dir = toward_camera.map(|v| -v);
    let right = [-az.sin(), az.cos(), 0.0];
    let up = cross(toward_camera, right);
    let half = (HALF_GROUND + 0.05) * camera.height;

    let style = &spec.style;
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let cam_bits = camera.azimuth.to_bits() ^ camera.elevation.to_bits().rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ cam_bits);

    const SUB: usize = 2;
    let mut img = Array3::zeros((3, side, side));
    for i in 0..side {
        for j in 0..side {
            let mut acc = [0.0; 3];
            let mut on_object = false;
            for si in 0..SUB {
                for sj in 0..SUB {
                    let x = ((j * SUB + sj) as f64 + 0.5) / (side * SUB) as f64 * 2.0 - 1.0;
                    let y = 1.0 - ((i * SUB + si) as f64 + 0.5) / (side * SUB) as f64 * 2.0;
                    let origin: V3 = std::array::from_fn(|a| {
                        half * (x * right[a] + y * up[a]) + 10.0 * toward_camera[a]
                    });
                    let hit = spec
                        .layout
                        .iter()
                        .filter_map(|obj| intersect(&obj.shape, origin, dir).map(|h| (h, obj)))
                        .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0));
                    let color = match hit {
                        Some(((t, n), obj)) => {
                            on_object = true;
                            let p = at(origin, dir, t);
                            let shade = face_tint(n) * stripes(p, style.texture_freq);
                            style.color(obj.palette_index).map(|c| c * shade)
                        }
                        None => style.ground,
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let grain = if on_object && style.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            for c in 0..3 {
                let v = (acc[c] / (SUB * SUB) as f64 + grain).clamp(0.0, 1.0);
                img[[c, i, j]] = v as f32 as f64;
            }
        }
    }
    Ok(img)
}
