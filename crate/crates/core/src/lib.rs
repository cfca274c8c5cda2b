//! Nonlocal feature matching and filtering denoiser for packed RAW images.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`] and [`tape`]: dense `f32`/`f64` tensors, the
//!   convolution and bilinear-sampling kernels, and reverse-mode
//!   differentiation over them.
//! - [`nn`]: the parameter store, initialisation and the simplified ConvNeXt block.
//! - [`nlfemf`]: the nonlocal matching, collaborative filtering and aggregation block.
//! - [`network`]: the multiscale UNet assembled from those blocks.
//! - [`noise`]: Poisson-Gaussian synthesis and noise level function estimation.
//! - [`raw`]: Bayer packing, normalisation and dihedral augmentation.
//! - [`train`]: loss, Adam, cosine schedule, sampling, checkpoints and validation.
//! - [`gradcheck`]: finite-difference verification of the analytic gradients.

pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod nlfemf;
pub mod nn;
pub mod noise;
pub mod raw;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
