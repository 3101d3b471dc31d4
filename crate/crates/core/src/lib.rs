//! Residual-learning CT denoiser, desk scale.
//!
//! The library trains a small conditional U-Net to predict the noise residual
//! of a low-dose CT slice in one network evaluation, driven by kernel
//! attraction/repulsion drift fields between batches of generated and real
//! residuals. Everything is self-contained: a reverse-mode autodiff core,
//! the drift-field estimators and losses, a phantom simulator, an AdamW+EMA
//! training loop with binary checkpoints, and image-quality metrics
//! (PSNR/SSIM and radial power spectra).

pub mod archive;
pub mod drift;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
