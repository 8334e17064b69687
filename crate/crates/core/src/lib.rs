//! Naturalistic adversarial patch generation against vision-language
//! retrieval models.
//!
//! The pipeline optimizes a perturbation field that is added to a seed patch,
//! pushed through a diffusion denoising chain so the result stays close to
//! natural image statistics, placed on the image at the location a
//! cross-attention saliency map points to, and scored against a text pool.
//! The crate ships a trainable toy dual-encoder surrogate and toy denoiser so
//! the whole attack, its baselines, and its evaluation protocol run on a
//! desktop.

pub mod attack;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod placement;
pub mod raster;
pub mod tape;

pub use error::{Error, Result};
pub use raster::{Image, Patch, Raster};
