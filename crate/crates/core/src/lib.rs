//! Cross-view (drone ↔ satellite) retrieval training with 3D anchors.
//!
//! Scene point clouds are encoded by a parameter-free pyramid
//! ([`pointcloud`]), fused by a gated expert block ([`mme`]) and used during
//! training only, as anchors that shape the 2D features of a shared image
//! encoder ([`image_encoder`]) through the losses in [`objectives`].
//! Retrieval ([`retrieval`]) runs on 2D features alone.

pub mod autodiff;
pub mod error;
pub mod features;
pub mod image_encoder;
pub mod instrument;
pub mod mme;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pointcloud;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;

pub use error::{GeoLinkError, Result};
pub use features::{l2_normalize, FeatureBatch, ViewTag};

/// First 16 hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
