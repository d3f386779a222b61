//! Small patch-mixer image encoder shared by the drone and satellite views.
//!
//! Patches are flattened and linearly embedded into tokens, passed through
//! residual token-mixing and channel-mixing blocks, mean-pooled and mapped
//! to the feature width by a linear head. Any encoder honoring
//! `ImageBatch → B×D` could stand in for it.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{GeoLinkError, Result};
use crate::features::{FeatureBatch, ViewTag};
use crate::nn::{fan_in_uniform, Linear, Mlp, Parameterized};

pub use crate::features::l2_normalize;

/// `C×H×W` pixels in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f64>,
    pub view_tag: ViewTag,
    pub scene_ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f64>, view_tag: ViewTag, scene_ids: Vec<String>) -> Result<Self> {
        let (b, c, h, w) = pixels.dim();
        if scene_ids.len() != b {
            return Err(GeoLinkError::DimMismatch(format!("{} ids for {b} images", scene_ids.len())));
        }
        if c != 3 || h != w {
            return Err(GeoLinkError::ShapeError(format!(
                "images must be 3×S×S, got {c}×{h}×{w}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(GeoLinkError::NonFinite("image batch"));
        }
        Ok(Self {
            pixels,
            view_tag,
            scene_ids,
        })
    }

    pub fn from_images(images: &[&Image], view_tag: ViewTag, scene_ids: Vec<String>) -> Result<Self> {
        let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
        let pixels = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| GeoLinkError::ShapeError(e.to_string()))?;
        Self::new(pixels, view_tag, scene_ids)
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub feature_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_size: 8,
            width: 64,
            blocks: 2,
            feature_dim: 64,
        }
    }
}

impl ImageEncoderConfig {
    pub fn tokens(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerBlock {
    /// `T×T`, mixes tokens within one image.
    pub token_mix: Mat,
    pub channel_mix: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub patch_size: usize,
    pub patch_embed: Linear,
    pub mixer_blocks: Vec<MixerBlock>,
    pub head: Linear,
}

impl EncoderParams {
    pub fn new(cfg: &ImageEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.patch_size == 0 || cfg.image_side % cfg.patch_size != 0 {
            return Err(GeoLinkError::ShapeError(format!(
                "image side {} not divisible by patch size {}",
                cfg.image_side, cfg.patch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let tokens = cfg.tokens();
        let patch_embed = Linear::new(&mut rng, patch_dim, cfg.width);
        let mixer_blocks = (0..cfg.blocks)
            .map(|_| MixerBlock {
                token_mix: fan_in_uniform(&mut rng, tokens, tokens),
                channel_mix: Mlp::new(&mut rng, cfg.width, 2 * cfg.width, cfg.width),
            })
            .collect();
        let head = Linear::new(&mut rng, cfg.width, cfg.feature_dim);
        Ok(Self {
            patch_size: cfg.patch_size,
            patch_embed,
            mixer_blocks,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.head.out_dim()
    }

    fn tokens_per_image(&self, side: usize) -> Result<usize> {
        if side % self.patch_size != 0 {
            return Err(GeoLinkError::ShapeError(format!(
                "image side {side} not divisible by patch size {}",
                self.patch_size
            )));
        }
        let t = (side / self.patch_size).pow(2);
        if let Some(b) = self.mixer_blocks.first() {
            if b.token_mix.nrows() != t {
                return Err(GeoLinkError::ShapeError(format!(
                    "encoder mixes {} tokens, images give {t}",
                    b.token_mix.nrows()
                )));
            }
        }
        Ok(t)
    }

    /// Build the forward pass on `g`; returns the unnormalized `B×D`
    /// features. Parameters are bound under `prefix`.
    pub fn forward(&self, g: &mut Graph, prefix: &str, batch: &ImageBatch) -> Result<Var> {
        let tokens = self.tokens_per_image(batch.side())?;
        let patches = patchify(&batch.pixels, self.patch_size);
        let x = g.constant(patches);
        let mut h = self.patch_embed.forward(g, &format!("{prefix}.patch_embed"), x);
        for (i, block) in self.mixer_blocks.iter().enumerate() {
            let mix = g.param(&format!("{prefix}.block{i}.token_mix"), &block.token_mix);
            let t = g.block_left_matmul(mix, h, tokens);
            let t = g.gelu(t);
            h = g.add(h, t);
            let c = block.channel_mix.forward(g, &format!("{prefix}.block{i}.channel_mix"), h);
            h = g.add(h, c);
        }
        let pooled = g.block_mean_rows(h, tokens);
        Ok(self.head.forward(g, &format!("{prefix}.head"), pooled))
    }
}

impl Parameterized for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Mat)) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), f);
        for (i, b) in self.mixer_blocks.iter().enumerate() {
            f(format!("{prefix}.block{i}.token_mix"), &b.token_mix);
            b.channel_mix.visit(&format!("{prefix}.block{i}.channel_mix"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.patch_embed.visit_mut(&format!("{prefix}.patch_embed"), f);
        for (i, b) in self.mixer_blocks.iter_mut().enumerate() {
            f(format!("{prefix}.block{i}.token_mix"), &mut b.token_mix);
            b.channel_mix.visit_mut(&format!("{prefix}.block{i}.channel_mix"), f);
        }
        self.head.visit_mut(&format!("{prefix}.head"), f);
    }
}

/// `(B·T)×(C·P·P)` matrix of flattened patches, tokens in row-major patch
/// order.
pub fn patchify(pixels: &Array4<f64>, patch: usize) -> Mat {
    let (b, c, h, w) = pixels.dim();
    let (ph, pw) = (h / patch, w / patch);
    let tokens = ph * pw;
    let mut out = Array2::zeros((b * tokens, c * patch * patch));
    for n in 0..b {
        for ty in 0..ph {
            for tx in 0..pw {
                let row = n * tokens + ty * pw + tx;
                let mut col = 0;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[[row, col]] = pixels[[n, ch, ty * patch + dy, tx * patch + dx]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Raw (unnormalized) `B×D` features for a batch.
pub fn encode_images(params: &EncoderParams, batch: &ImageBatch) -> Result<FeatureBatch> {
    let mut g = Graph::new();
    let out = params.forward(&mut g, "image", batch)?;
    FeatureBatch::new(g.value(out).clone(), batch.view_tag, batch.scene_ids.clone())
}

/// Nearest-neighbour resize to `side×side`.
pub fn resize_nearest(img: &Image, side: usize) -> Image {
    let (c, h, w) = img.dim();
    if h == side && w == side {
        return img.clone();
    }
    Array3::from_shape_fn((c, side, side), |(ch, y, x)| {
        let sy = (y * h) / side;
        let sx = (x * w) / side;
        img[[ch, sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Decode a PNG into `3×side×side` pixels in `[0, 1]`.
pub fn load_png(path: &Path, side: usize) -> Result<Image> {
    if !path.exists() {
        return Err(GeoLinkError::MissingView(path.to_path_buf()));
    }
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let img = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    Ok(resize_nearest(&img, side))
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}
