//! Perception-oriented single-image super-resolution: a residual
//! channel-attention generator, dual relativistic-average discriminators,
//! two-stage training and an evaluation harness, all on a small
//! double-precision autodiff engine.

pub mod blocks;
pub mod data;
pub mod discriminators;
pub mod engine;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
