//! Differential gated self-attention (M-DGSA) and its baselines, built on a
//! small reverse-mode autodiff engine, with the training, data and
//! visualization tooling needed to exercise them end to end.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
