//! Generative image-noise model conditioned on contrastive noise embeddings:
//! networks, objectives, data pipeline, training loop and evaluation.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod denoise;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod noise;
pub mod report;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImagePatch;
pub use noise::{NoiseKind, NoiseSpec, Regime};
