use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GeoLinkError, Result};
use crate::image_encoder::ImageEncoderConfig;
use crate::objectives::LossConfig;
use crate::pointcloud::EncoderConfig;

/// Every knob of a training run. Serialized as a flat `key = value` file
/// (TOML without tables); missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    /// Warmup length as a fraction of one epoch.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub lambda_sc: f64,
    pub expert_count: usize,
    pub feature_dim: usize,
    pub vclub_hidden: usize,
    pub seed: u64,

    pub ga: bool,
    pub sc: bool,
    pub rd: bool,
    pub mme: bool,

    pub tau_init: f64,
    pub learn_tau: bool,
    pub symmetric_nce: bool,
    pub teacher_grad: bool,
    /// Fit the estimators before (true) or after (false) the encoder update.
    pub estimator_first: bool,
    /// Average all drone views of a scene instead of sampling one per step.
    pub multi_view: bool,
    /// Evaluate every this many epochs during training; 0 = only at the end.
    pub eval_every: usize,

    pub image_side: usize,
    pub patch_size: usize,
    pub mixer_width: usize,
    pub mixer_blocks: usize,

    pub pc_points: usize,
    pub pc_stages: usize,
    pub pc_neighbors: usize,
    pub pc_initial_dim: usize,
    pub pc_alpha: f64,
    pub pc_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let img = ImageEncoderConfig::default();
        let pc = EncoderConfig::default();
        Self {
            epochs: 40,
            batch_size: 8,
            base_lr: 6e-4,
            final_lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            lambda_sc: 4.0,
            expert_count: 3,
            feature_dim: 64,
            vclub_hidden: 64,
            seed: 0,
            ga: true,
            sc: true,
            rd: true,
            mme: true,
            tau_init: 0.05,
            learn_tau: true,
            symmetric_nce: false,
            teacher_grad: false,
            estimator_first: true,
            multi_view: false,
            eval_every: 0,
            image_side: img.image_side,
            patch_size: img.patch_size,
            mixer_width: img.width,
            mixer_blocks: img.blocks,
            pc_points: pc.num_points,
            pc_stages: pc.num_stages,
            pc_neighbors: pc.k_neighbors,
            pc_initial_dim: pc.initial_dim,
            pc_alpha: pc.pose_alpha,
            pc_beta: pc.pose_beta,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GeoLinkError::ConfigError(m));
        if !(self.base_lr > self.final_lr && self.final_lr > 0.0) {
            return err(format!("need base_lr > final_lr > 0, got {} and {}", self.base_lr, self.final_lr));
        }
        if self.batch_size < 2 {
            return err(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return err("warmup_fraction must lie in [0, 1]".into());
        }
        if self.lambda_sc < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return err("lambda_sc, weight_decay and grad_clip must be non-negative".into());
        }
        if !(self.tau_init > 0.0) {
            return err("tau_init must be positive".into());
        }
        if self.vclub_hidden == 0 {
            return err("vclub_hidden must be ≥ 1".into());
        }
        if self.mme && (self.expert_count == 0 || self.feature_dim % (self.expert_count + 1) != 0) {
            return err(format!(
                "feature_dim {} must be divisible by expert_count + 1 = {}",
                self.feature_dim,
                self.expert_count + 1
            ));
        }
        self.pointcloud_config().validate()?;
        let img = self.image_config();
        if img.patch_size == 0 || img.image_side % img.patch_size != 0 {
            return err(format!("image_side {} not divisible by patch_size {}", img.image_side, img.patch_size));
        }
        Ok(())
    }

    pub fn image_config(&self) -> ImageEncoderConfig {
        ImageEncoderConfig {
            image_side: self.image_side,
            patch_size: self.patch_size,
            width: self.mixer_width,
            blocks: self.mixer_blocks,
            feature_dim: self.feature_dim,
        }
    }

    pub fn pointcloud_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_stages: self.pc_stages,
            k_neighbors: self.pc_neighbors,
            initial_dim: self.pc_initial_dim,
            pose_alpha: self.pc_alpha,
            pose_beta: self.pc_beta,
            num_points: self.pc_points,
            random_start_seed: None,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau_init: self.tau_init,
            learn_tau: self.learn_tau,
            lambda_sc: self.lambda_sc,
            enable_ga: self.ga,
            enable_sc: self.sc,
            enable_rd: self.rd,
            symmetric: self.symmetric_nce,
            teacher_grad: self.teacher_grad,
        }
    }

    /// Stable 16-hex-digit fingerprint of the whole configuration.
    pub fn config_hash(&self) -> String {
        crate::short_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GeoLinkError::ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Training steps in one epoch (incomplete final batches are dropped).
    pub fn steps_per_epoch(&self, train_scenes: usize) -> usize {
        (train_scenes / self.batch_size).max(1)
    }

    pub fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        (self.warmup_fraction * steps_per_epoch as f64).floor() as usize
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup from zero to
/// `base_lr`, then half-cosine decay to `final_lr` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let spe = total_steps / cfg.epochs.max(1);
    let warmup = cfg.warmup_steps(spe.max(1)).min(total_steps);
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
