//! Multi-scale autoregressive image generation with a flow-matching head
//! supervised on both the first and second time derivative of its path.
//!
//! The pipeline, bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: dense 64-bit tensors and a define-by-run tape.
//! - [`schedule`]: linear and variance-preserving paths with analytic derivatives.
//! - [`multiscale`]: block-average downsampling, the scale tokenizer, bicubic upsampling.
//! - [`transformer`]: next-scale transformer producing per-scale conditions.
//! - [`flow_matching`]: modulated attention/MLP block and the two heads.
//! - [`train`] / [`sample`]: the training loop and the Taylor sampler.
//! - [`checkpoint`], [`config`], [`ppm`], [`bench`], [`gradcheck`]: harness.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow_matching;
pub mod gradcheck;
pub mod model;
pub mod multiscale;
pub mod optim;
pub mod ppm;
pub mod sample;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use flow_matching::{LnEps, Order};
pub use model::{Model, ModelConfig, ModelParams};
pub use multiscale::{PyramidConfig, TokenPyramid};
pub use schedule::Schedule;
pub use tensor::{Matrix, Tensor, TensorError};
