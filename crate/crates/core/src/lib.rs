//! Gated-shortcut residual blocks for GAN generators.
//!
//! The crate carries everything needed to build, train, and evaluate the
//! generators and discriminators at desk scale: a small tensor library with
//! reverse-mode differentiation, the layers and residual blocks, the
//! adversarial training loop, FID/IS metrics, and dataset readers.

pub mod archive;
pub mod blocks;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod session;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
