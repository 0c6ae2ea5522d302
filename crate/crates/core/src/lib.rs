//! Desk-scale text-to-motion diffusion toolkit.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod condition;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod footskate;
pub mod motion;
pub mod sampling;
pub mod schedule;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
