//! On-disk dataset layout and loading.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<scene_id>/drone_<k>.(rt|png)
//! <root>/<scene_id>/satellite.(rt|png)
//! <root>/<scene_id>/cloud.(ply|xyz)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, write_tensor};
use super::{generate_with, DomainStyle, GenerationConfig, SceneTriplet};
use crate::error::{GeoLinkError, Result};
use crate::image_encoder::{load_png, resize_nearest, Image};
use crate::pointcloud::io::{load_pointcloud, write_ply};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    /// Scenes whose drone images (or satellite image, for s2d) are queries.
    pub query: Vec<String>,
    /// Scenes searched against; a superset of `query` when distractors exist.
    pub gallery: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub domain: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub image_side: usize,
    pub num_points: usize,
    pub scenes: Vec<SceneEntry>,
    pub splits: Splits,
}

/// Parameters of a generated source/target dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub source_scenes: usize,
    pub target_scenes: usize,
    /// Extra target-domain scenes that only appear in the gallery.
    pub distractors: usize,
    pub drone_views: usize,
    pub image_side: usize,
    pub num_points: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source_scenes: 64,
            target_scenes: 32,
            distractors: 0,
            drone_views: 4,
            image_side: 32,
            num_points: 1024,
        }
    }
}

/// A manifest plus every scene it names, keyed by scene id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: BTreeMap<String, SceneTriplet>,
}

/// Seed offset separating target-area geometry from source-area geometry.
const TARGET_AREA: u64 = 0x7a26_e7a2;

impl Dataset {
    /// Source scenes for training; disjoint, style-shifted target scenes
    /// for query and gallery.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let gen = |prefix: &str, n: usize, seed: u64, style: &DomainStyle| {
            generate_with(
                seed,
                n,
                style,
                &GenerationConfig {
                    drone_views: cfg.drone_views,
                    image_side: cfg.image_side,
                    num_points: cfg.num_points,
                    id_prefix: prefix.into(),
                },
            )
        };
        let source = gen("src", cfg.source_scenes, cfg.seed, &DomainStyle::source())?;
        let target = gen(
            "tgt",
            cfg.target_scenes + cfg.distractors,
            cfg.seed ^ TARGET_AREA,
            &DomainStyle::target(),
        )?;
        let ids = |v: &[SceneTriplet]| v.iter().map(|t| t.scene_id.clone()).collect::<Vec<_>>();
        let target_ids = ids(&target);
        let splits = Splits {
            train: ids(&source),
            query: target_ids[..cfg.target_scenes].to_vec(),
            gallery: target_ids.clone(),
        };
        let scenes_meta = source
            .iter()
            .map(|t| SceneEntry { id: t.scene_id.clone(), domain: "source".into() })
            .chain(target.iter().map(|t| SceneEntry { id: t.scene_id.clone(), domain: "target".into() }))
            .collect();
        let manifest = Manifest {
            version: 1,
            seed: Some(cfg.seed),
            image_side: cfg.image_side,
            num_points: cfg.num_points,
            scenes: scenes_meta,
            splits,
        };
        let scenes = source.into_iter().chain(target).map(|t| (t.scene_id.clone(), t)).collect();
        Ok(Self { manifest, scenes })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        for t in self.scenes.values() {
            write_scene(&root.join(&t.scene_id), t)?;
        }
        fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Err(GeoLinkError::MissingView(path));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let mut scenes = BTreeMap::new();
        for entry in &manifest.scenes {
            let paths = discover_scene(&root.join(&entry.id))?;
            let t = load_external_triplet(&paths, manifest.image_side, manifest.num_points)?;
            scenes.insert(entry.id.clone(), t);
        }
        let ds = Self { manifest, scenes };
        for name in ["train", "query", "gallery"] {
            for id in ds.split_ids(name)? {
                if !ds.scenes.contains_key(id) {
                    return Err(GeoLinkError::ConfigError(format!("split {name} names unknown scene {id}")));
                }
            }
        }
        Ok(ds)
    }

    pub fn split_ids(&self, name: &str) -> Result<&[String]> {
        let s = &self.manifest.splits;
        match name {
            "train" => Ok(&s.train),
            "query" => Ok(&s.query),
            "gallery" => Ok(&s.gallery),
            other => Err(GeoLinkError::ConfigError(format!("unknown split {other}"))),
        }
    }

    /// Triplets of a split in manifest order. Errors on an empty split.
    pub fn split(&self, name: &str) -> Result<Vec<&SceneTriplet>> {
        let ids = self.split_ids(name)?;
        if ids.is_empty() {
            return Err(GeoLinkError::EmptySplit(name.to_string()));
        }
        ids.iter()
            .map(|id| {
                self.scenes
                    .get(id)
                    .ok_or_else(|| GeoLinkError::ConfigError(format!("unknown scene {id}")))
            })
            .collect()
    }
}

fn to_f32(img: &Image) -> ndarray::ArrayD<f32> {
    img.mapv(|v| v as f32).into_dyn()
}

pub fn write_scene(dir: &Path, t: &SceneTriplet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, img) in t.drone_images.iter().enumerate() {
        write_tensor(&dir.join(format!("drone_{k}.rt")), &to_f32(img))?;
    }
    write_tensor(&dir.join("satellite.rt"), &to_f32(&t.satellite_image))?;
    write_ply(&dir.join("cloud.ply"), &t.pointcloud)
}

/// Files making up one scene on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletPaths {
    pub scene_id: String,
    pub drones: Vec<PathBuf>,
    pub satellite: PathBuf,
    pub cloud: PathBuf,
}

fn first_existing(dir: &Path, stem: &str, exts: &[&str]) -> Result<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.exists())
        .ok_or_else(|| GeoLinkError::MissingView(dir.join(format!("{stem}.{}", exts[0]))))
}

/// Locate the files of the scene stored in `dir`.
pub fn discover_scene(dir: &Path) -> Result<TripletPaths> {
    if !dir.is_dir() {
        return Err(GeoLinkError::MissingView(dir.to_path_buf()));
    }
    let mut drones = Vec::new();
    for k in 0.. {
        match first_existing(dir, &format!("drone_{k}"), &["rt", "png"]) {
            Ok(p) => drones.push(p),
            Err(_) => break,
        }
    }
    if drones.is_empty() {
        return Err(GeoLinkError::MissingView(dir.join("drone_0.rt")));
    }
    Ok(TripletPaths {
        scene_id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        drones,
        satellite: first_existing(dir, "satellite", &["rt", "png"])?,
        cloud: first_existing(dir, "cloud", &["ply", "xyz"])?,
    })
}

/// Read an image from `.rt` (a `3×H×W` float tensor) or `.png`.
pub fn load_image(path: &Path, side: usize) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rt") => {
            let t = read_tensor(path)?;
            let img: Array3<f32> = t.into_dimensionality::<Ix3>().map_err(|_| GeoLinkError::ParseError {
                file: path.to_path_buf(),
                line: 0,
                message: "expected a rank-3 tensor".into(),
            })?;
            if img.dim().0 != 3 {
                return Err(GeoLinkError::ShapeError(format!("{}: expected 3 channels", path.display())));
            }
            Ok(resize_nearest(&img.mapv(f64::from), side))
        }
        _ => load_png(path, side),
    }
}

/// Assemble a triplet from files, fitting the cloud to `num_points`.
pub fn load_external_triplet(paths: &TripletPaths, image_side: usize, num_points: usize) -> Result<SceneTriplet> {
    let drone_images = paths
        .drones
        .iter()
        .map(|p| load_image(p, image_side))
        .collect::<Result<Vec<_>>>()?;
    let satellite_image = load_image(&paths.satellite, image_side)?;
    let mut pointcloud = load_pointcloud(&paths.cloud, num_points)?;
    pointcloud.scene_id = paths.scene_id.clone();
    Ok(SceneTriplet {
        scene_id: paths.scene_id.clone(),
        drone_images,
        satellite_image,
        pointcloud,
    })
}
