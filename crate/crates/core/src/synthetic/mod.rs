//! Deterministic synthetic scenes: a handful of boxes and cylinders on a
//! ground square, rendered from oblique drone cameras and a top-down
//! satellite camera, with a point cloud sampled from the object surfaces.
//!
//! A [`DomainStyle`] only changes appearance. Two calls with the same seed
//! and different styles share every piece of geometry.

mod dataset;
mod render;
mod surface;
pub mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GeoLinkError, Result};
use crate::image_encoder::Image;
use crate::pointcloud::PointCloud;

pub use dataset::{
    discover_scene, load_external_triplet, load_image, write_scene, Dataset, DatasetConfig, Manifest, SceneEntry, Splits,
    TripletPaths,
};
pub use render::{render_view, Camera};
pub use surface::{distance_to_surface, sample_pointcloud};

/// Latent identity width.
pub const LATENT_DIM: usize = 8;
/// Objects live in `[-HALF_GROUND, HALF_GROUND]²`.
pub const HALF_GROUND: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box standing on the ground.
    Box { center: [f64; 2], half: [f64; 2], height: f64 },
    /// Vertical cylinder standing on the ground.
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
}

impl Shape {
    pub fn height(&self) -> f64 {
        match *self {
            Shape::Box { height, .. } | Shape::Cylinder { height, .. } => height,
        }
    }

    /// Ground-plane bounding rectangle `(min, max)`.
    pub fn footprint(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Shape::Box { center, half, .. } => (
                [center[0] - half[0], center[1] - half[1]],
                [center[0] + half[0], center[1] + half[1]],
            ),
            Shape::Cylinder { center, radius, .. } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into the active style's palette.
    pub palette_index: usize,
}

/// Appearance parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub palette: Vec<[f64; 3]>,
    pub ground: [f64; 3],
    /// Standard deviation of per-pixel noise on object surfaces.
    pub noise_sigma: f64,
    /// Stripes per unit length of the surface texture.
    pub texture_freq: f64,
}

const BASE_PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.30, 0.25],
    [0.25, 0.85, 0.35],
    [0.30, 0.45, 0.95],
    [0.95, 0.85, 0.25],
    [0.85, 0.35, 0.90],
    [0.30, 0.90, 0.90],
];

impl DomainStyle {
    pub fn source() -> Self {
        Self {
            name: "source".into(),
            palette: BASE_PALETTE.to_vec(),
            ground: [0.22, 0.26, 0.20],
            noise_sigma: 0.02,
            texture_freq: 3.0,
        }
    }

    /// Palette rotated (channels cycled and entries shifted), brighter
    /// ground, heavier noise and finer texture.
    pub fn target() -> Self {
        let n = BASE_PALETTE.len();
        let palette = (0..n)
            .map(|i| {
                let c = BASE_PALETTE[(i + 2) % n];
                [c[1], c[2], c[0]]
            })
            .collect();
        Self {
            name: "target".into(),
            palette,
            ground: [0.30, 0.26, 0.24],
            noise_sigma: 0.06,
            texture_freq: 7.0,
        }
    }

    pub fn color(&self, index: usize) -> [f64; 3] {
        self.palette[index % self.palette.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub latent: Vec<f64>,
    pub layout: Vec<SceneObject>,
    pub style: DomainStyle,
    /// Seed for per-scene randomness that must not depend on style
    /// (camera jitter, surface sampling, image noise).
    pub seed: u64,
}

/// All images and the point cloud of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTriplet {
    pub scene_id: String,
    pub drone_images: Vec<Image>,
    pub satellite_image: Image,
    pub pointcloud: PointCloud,
}

/// 64-bit seed derived from a dataset seed and a scene id.
pub fn scene_seed(seed: u64, scene_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(scene_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The layout and latent of `scene_id` under `seed`.
pub fn scene_spec(seed: u64, scene_id: &str, style: &DomainStyle) -> SceneSpec {
    let s = scene_seed(seed, scene_id);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut latent: Vec<f64> = (0..LATENT_DIM)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let norm = latent.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    latent.iter_mut().for_each(|v| *v /= norm);

    let count = rng.random_range(2..=5);
    let margin = HALF_GROUND - 0.05;
    let layout = (0..count)
        .map(|_| {
            let height = rng.random_range(0.1..0.5);
            let shape = if rng.random_bool(0.6) {
                let half = [rng.random_range(0.05..0.15), rng.random_range(0.05..0.15)];
                let center = [
                    rng.random_range(-margin + half[0]..margin - half[0]),
                    rng.random_range(-margin + half[1]..margin - half[1]),
                ];
                Shape::Box { center, half, height }
            } else {
                let radius = rng.random_range(0.05..0.12);
                let center = [
                    rng.random_range(-margin + radius..margin - radius),
                    rng.random_range(-margin + radius..margin - radius),
                ];
                Shape::Cylinder { center, radius, height }
            };
            SceneObject {
                shape,
                palette_index: rng.random_range(0..BASE_PALETTE.len()),
            }
        })
        .collect();
    SceneSpec {
        scene_id: scene_id.to_string(),
        latent,
        layout,
        style: style.clone(),
        seed: s,
    }
}

/// Drone cameras for a scene: evenly spread azimuths with jitter, oblique
/// elevations. Independent of style.
pub fn drone_cameras(spec: &SceneSpec, views: usize) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xd20e);
    (0..views)
        .map(|k| Camera {
            azimuth: 360.0 * k as f64 / views as f64 + rng.random_range(-20.0..20.0),
            elevation: rng.random_range(35.0..60.0),
            height: 1.0,
        })
        .collect()
}

/// Knobs of scene generation beyond seed, count and style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub drone_views: usize,
    pub image_side: usize,
    pub num_points: usize,
    pub id_prefix: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            drone_views: 4,
            image_side: 32,
            num_points: 1024,
            id_prefix: "scene".into(),
        }
    }
}

pub fn scene_id(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:04}")
}

/// Render and sample one scene.
pub fn build_triplet(spec: &SceneSpec, cfg: &GenerationConfig) -> Result<SceneTriplet> {
    let drone_images = drone_cameras(spec, cfg.drone_views)
        .iter()
        .map(|cam| render_view(spec, cam, cfg.image_side))
        .collect::<Result<Vec<_>>>()?;
    let satellite_image = render_view(spec, &Camera::satellite(), cfg.image_side)?;
    let pointcloud = sample_pointcloud(spec, cfg.num_points, spec.seed)?;
    Ok(SceneTriplet {
        scene_id: spec.scene_id.clone(),
        drone_images,
        satellite_image,
        pointcloud,
    })
}

/// `n_scenes` triplets with ids `scene_0000…`.
pub fn generate_dataset(
    seed: u64,
    n_scenes: usize,
    drone_views_per_scene: usize,
    domain_style: &DomainStyle,
) -> Result<Vec<SceneTriplet>> {
    let cfg = GenerationConfig {
        drone_views: drone_views_per_scene,
        ..Default::default()
    };
    generate_with(seed, n_scenes, domain_style, &cfg)
}

pub fn generate_with(
    seed: u64,
    n_scenes: usize,
    style: &DomainStyle,
    cfg: &GenerationConfig,
) -> Result<Vec<SceneTriplet>> {
    if n_scenes < 2 {
        return Err(GeoLinkError::ConfigError(format!("need at least 2 scenes, got {n_scenes}")));
    }
    if cfg.drone_views == 0 {
        return Err(GeoLinkError::ConfigError("need at least one drone view".into()));
    }
    (0..n_scenes)
        .map(|i| build_triplet(&scene_spec(seed, &scene_id(&cfg.id_prefix, i), style), cfg))
        .collect()
}
