//! Training loop: deterministic batch assembly, alternating estimator and
//! encoder updates, checkpointing and resume.

mod ablation;
mod config;
mod model;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{GeoLinkError, Result};
use crate::features::ViewTag;
use crate::image_encoder::{Image, ImageBatch};
use crate::objectives::LossReport;
use crate::optim::{clip_global_norm, AdamW};
use crate::pointcloud::{encode_pointcloud, EncoderConfig};
use crate::retrieval::{evaluate, Direction, RetrievalResult};
use crate::synthetic::{Dataset, SceneTriplet};

pub use ablation::{
    ablation_matrix, run_sweep, sensitivity_grid, validate_report, write_report, GridSpec, SweepReport, SweepRow,
};
pub use config::{lr_at, TrainConfig};
pub use model::{
    build_losses, forward_views, inverse_temperature, AnchorBranch, LossVars, Model, TripletBatch, ViewVars, IMAGE,
    LOG_TAU, MME, PROJ, VCLUB, VCLUB_DRONE, VCLUB_SATELLITE,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Git-describe-style version string of this build.
pub fn version() -> &'static str {
    option_env!("GEOLINK_GIT_DESCRIBE").unwrap_or(concat!("v", env!("CARGO_PKG_VERSION")))
}

/// Point-cloud features per scene, keyed by `(scene_id, encoder fingerprint)`.
#[derive(Clone, Debug, Default)]
pub struct PointFeatureCache {
    entries: BTreeMap<(String, String), Array1<f64>>,
}

impl PointFeatureCache {
    pub fn get_or_encode(&mut self, scene: &SceneTriplet, cfg: &EncoderConfig) -> Result<&Array1<f64>> {
        let key = (scene.scene_id.clone(), cfg.fingerprint());
        if !self.entries.contains_key(&key) {
            let f = encode_pointcloud(&scene.pointcloud, cfg)?;
            self.entries.insert(key.clone(), f);
        }
        Ok(&self.entries[&key])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One row of the per-step loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub evaluations: Vec<(usize, Vec<RetrievalResult>)>,
}

impl History {
    /// `step, L_cc, L_sc, L_ga, L_rd, L_total, tau, …` as CSV text.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(
            "step,L_cc,L_sc,L_ga,L_rd,L_total,tau,nce_dro_sat,nce_dro_pc,nce_sat_pc,lr,grad_norm\n",
        );
        for r in &self.steps {
            let l = &r.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                l.cross_view,
                l.intra_view,
                l.geometric,
                l.relational,
                l.total,
                l.tau,
                l.nce_drone_satellite,
                l.nce_drone_pointcloud,
                l.nce_satellite_pointcloud,
                r.lr,
                r.grad_norm
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub step: usize,
    pub total_steps: usize,
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub estimator_optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(GeoLinkError::ConfigError(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Inference-only copy: the 3D branch, estimators and optimizer state
    /// are dropped.
    pub fn stripped(&self) -> Self {
        let mut c = self.clone();
        c.model.strip_anchor();
        c.optimizer = None;
        c.estimator_optimizer = None;
        c
    }
}

/// Runs training over the `train` split of a dataset.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    dataset: &'a Dataset,
    train: Vec<&'a SceneTriplet>,
    pc_features: Vec<Array1<f64>>,
    pub model: Model,
    optimizer: AdamW,
    estimator_optimizer: AdamW,
    pub step: usize,
    total_steps: usize,
}

fn stack_images(images: &[&Image], tag: ViewTag, ids: Vec<String>) -> Result<ImageBatch> {
    ImageBatch::from_images(images, tag, ids)
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let train = dataset.split("train")?;
        if train.len() < config.batch_size {
            return Err(GeoLinkError::ConfigError(format!(
                "{} training scenes cannot fill a batch of {}",
                train.len(),
                config.batch_size
            )));
        }
        let side = train[0].satellite_image.dim().1;
        if side != config.image_side {
            return Err(GeoLinkError::ConfigError(format!(
                "dataset images are {side}px but image_side is {}",
                config.image_side
            )));
        }
        let pc_cfg = config.pointcloud_config();
        let mut cache = PointFeatureCache::default();
        let pc_features = train
            .iter()
            .map(|t| cache.get_or_encode(t, &pc_cfg).cloned())
            .collect::<Result<Vec<_>>>()?;
        let stacked = ndarray::stack(Axis(0), &pc_features.iter().map(|f| f.view()).collect::<Vec<_>>())
            .map_err(|e| GeoLinkError::ShapeError(e.to_string()))?;
        let mean = stacked.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let scale = stacked.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6)).insert_axis(Axis(0));
        let model = Model::new(&config, mean, scale)?;
        let total_steps = config.epochs * config.steps_per_epoch(train.len());
        Ok(Self {
            optimizer: AdamW::new(config.weight_decay),
            estimator_optimizer: AdamW::new(0.0),
            config,
            dataset,
            train,
            pc_features,
            model,
            step: 0,
            total_steps,
        })
    }

    /// Continue from a saved state.
    pub fn resume(ck: &Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), dataset)?;
        if ck.model.anchor.is_none() {
            return Err(GeoLinkError::ConfigError("cannot resume from a stripped checkpoint".into()));
        }
        t.model = ck.model.clone();
        t.optimizer = ck.optimizer.clone().unwrap_or_else(|| AdamW::new(ck.config.weight_decay));
        t.estimator_optimizer = ck.estimator_optimizer.clone().unwrap_or_else(|| AdamW::new(0.0));
        t.step = ck.step;
        Ok(t)
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.train.len())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total_steps,
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            estimator_optimizer: Some(self.estimator_optimizer.clone()),
        }
    }

    /// The batch for a global step: a per-epoch shuffle of the training
    /// scenes and one drone view per scene, all derived from the seed.
    pub fn batch_at(&self, step: usize) -> Result<TripletBatch> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x5851_f42d)));
        let b = self.config.batch_size;
        let picked = &order[within * b..(within + 1) * b];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x1000 + step as u64));

        let scenes: Vec<&SceneTriplet> = picked.iter().map(|&i| self.train[i]).collect();
        let ids: Vec<String> = scenes.iter().map(|t| t.scene_id.clone()).collect();
        let (drone_imgs, drone_ids, views): (Vec<&Image>, Vec<String>, usize) = if self.config.multi_view {
            let v = scenes.iter().map(|t| t.drone_images.len()).min().unwrap_or(1);
            let imgs = scenes.iter().flat_map(|t| t.drone_images[..v].iter()).collect();
            let ids = scenes.iter().flat_map(|t| std::iter::repeat_n(t.scene_id.clone(), v)).collect();
            (imgs, ids, v)
        } else {
            let imgs = scenes
                .iter()
                .map(|t| &t.drone_images[rng.random_range(0..t.drone_images.len())])
                .collect();
            (imgs, ids.clone(), 1)
        };
        let sats: Vec<&Image> = scenes.iter().map(|t| &t.satellite_image).collect();
        let pc_rows: Vec<_> = picked.iter().map(|&i| self.pc_features[i].view()).collect();
        Ok(TripletBatch {
            drone: stack_images(&drone_imgs, ViewTag::Drone, drone_ids)?,
            drone_views: views,
            satellite: stack_images(&sats, ViewTag::Satellite, ids.clone())?,
            pc_features: ndarray::stack(Axis(0), &pc_rows).map_err(|e| GeoLinkError::ShapeError(e.to_string()))?,
            scene_ids: ids,
        })
    }

    fn fit_estimators(&mut self, views: &(Mat, Mat, Mat), lr: f64) {
        let anchor = self.model.anchor.as_mut().expect("3D branch present while training");
        let (dro, sat, pc) = views;
        let opt = &mut self.estimator_optimizer;
        anchor.vclub_drone.ml_step_named(pc, dro, opt, lr, VCLUB_DRONE);
        anchor.vclub_satellite.ml_step_named(pc, sat, opt, lr, VCLUB_SATELLITE);
    }

    /// One optimization step. See the module docs for the ordering.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.batch_at(self.step)?;
        let lr = lr_at(self.step, self.total_steps, &self.config);
        let lcfg = self.config.loss_config();

        let mut g = Graph::new();
        g.freeze_prefixes([VCLUB]);
        if !lcfg.learn_tau {
            g.freeze_prefixes([LOG_TAU]);
        }
        let views = forward_views(&mut g, &self.model, &batch)?;
        let detached = (
            g.value(views.drone).clone(),
            g.value(views.satellite).clone(),
            g.value(views.pointcloud).clone(),
        );
        if lcfg.enable_ga && self.config.estimator_first {
            self.fit_estimators(&detached, lr);
        }
        let losses = build_losses(&mut g, &self.model, views, &lcfg);
        g.backward(losses.total);
        let mut grads = g.param_grads();
        let loss = self.report(&g, &losses);
        let grad_norm = if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip)
        } else {
            grads.values().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
        };
        if !loss.total.is_finite() {
            return Err(GeoLinkError::NonFinite("training loss"));
        }
        self.optimizer.step(&mut self.model, "", &grads, lr);
        if lcfg.enable_ga && !self.config.estimator_first {
            self.fit_estimators(&detached, lr);
        }
        let record = StepRecord { step: self.step, lr, loss, grad_norm };
        self.step += 1;
        Ok(record)
    }

    fn report(&self, g: &Graph, losses: &LossVars) -> LossReport {
        let scalar = |v: Option<Var>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
        LossReport {
            cross_view: g.scalar(losses.cross_view),
            intra_view: scalar(losses.intra_view),
            geometric: scalar(losses.geometric),
            relational: scalar(losses.relational),
            total: g.scalar(losses.total),
            tau: self.model.tau(),
            nce_drone_satellite: g.scalar(losses.nce_drone_satellite),
            nce_drone_pointcloud: g.scalar(losses.nce_drone_pointcloud),
            nce_satellite_pointcloud: g.scalar(losses.nce_satellite_pointcloud),
        }
    }

    /// Loss terms of the current model on the batch of `step`, without
    /// updating anything.
    pub fn evaluate_loss(&self, step: usize) -> Result<LossReport> {
        let batch = self.batch_at(step)?;
        let mut g = Graph::new();
        let views = forward_views(&mut g, &self.model, &batch)?;
        let losses = build_losses(&mut g, &self.model, views, &self.config.loss_config());
        Ok(self.report(&g, &losses))
    }

    /// Train until `until` (or the end of the schedule). Evaluation
    /// snapshots are taken every `eval_every` epochs when the dataset has
    /// query and gallery splits.
    pub fn run(&mut self, until: Option<usize>) -> Result<History> {
        let end = until.unwrap_or(self.total_steps).min(self.total_steps);
        let mut history = History::default();
        let spe = self.steps_per_epoch();
        while self.step < end {
            let rec = self.train_step()?;
            log::debug!(
                "step {} lr {:.2e} total {:.4} cc {:.4} tau {:.4}",
                rec.step,
                rec.lr,
                rec.loss.total,
                rec.loss.cross_view,
                rec.loss.tau
            );
            history.steps.push(rec);
            let every = self.config.eval_every;
            if every > 0 && self.step % (every * spe) == 0 && self.step < self.total_steps {
                if let Ok(r) = self.evaluate_both(&[1, 5, 10]) {
                    history.evaluations.push((self.step, r));
                }
            }
        }
        Ok(history)
    }

    pub fn evaluate_both(&self, ks: &[usize]) -> Result<Vec<RetrievalResult>> {
        [Direction::DroneToSatellite, Direction::SatelliteToDrone]
            .into_iter()
            .map(|d| evaluate(&self.model.image, self.dataset, d, ks))
            .collect()
    }
}

/// Train from scratch for the full schedule.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, History)> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    let history = t.run(None)?;
    Ok((t.checkpoint(), history))
}

/// `run.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub steps: usize,
    pub final_loss: Option<LossReport>,
    pub metrics: Vec<RetrievalResult>,
}

/// Train, then write `checkpoint.json`, `losses.csv` and `run.json` to
/// `out`. Evaluation runs when the dataset has query and gallery splits.
pub fn train_to_dir(config: &TrainConfig, dataset: &Dataset, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let mut t = Trainer::new(config.clone(), dataset)?;
    let history = t.run(None)?;
    t.checkpoint().save(&out.join("checkpoint.json"))?;
    fs::write(out.join("losses.csv"), history.loss_csv())?;
    let metrics = if dataset.manifest.splits.query.is_empty() {
        Vec::new()
    } else {
        t.evaluate_both(&[1, 5, 10])?
    };
    let summary = RunSummary {
        version: version().to_string(),
        seed: config.seed,
        config_hash: config.config_hash(),
        config: config.clone(),
        steps: t.step,
        final_loss: history.steps.last().map(|s| s.loss),
        metrics,
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Stack L2-normalized rows of `images` into a matrix (helper for tests
/// and the CLI's encode command).
pub fn stack_rows(rows: &[Array1<f64>]) -> Mat {
    let mut m = Array2::zeros((rows.len(), rows.first().map_or(0, |r| r.len())));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}
