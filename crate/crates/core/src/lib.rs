//! Unified INT8 training for small convolutional networks.
//!
//! The crate quantizes weights, activations and activation gradients of
//! convolution and fully connected layers to symmetric 8-bit integers, runs
//! both passes through integer kernels, and keeps training stable with two
//! per-layer controls: a clip value chosen to minimise the direction
//! deviation of the quantized gradient, and a learning-rate factor that
//! shrinks as that deviation grows.

pub mod checkpoint;
pub mod cli;
pub mod clip;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod lr_scale;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
