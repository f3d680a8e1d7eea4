//! Block-causal few-step video diffusion distillation and streaming, built on
//! a conditional Gaussian world whose exact denoiser serves as the teacher.

pub mod bundle;
pub mod conditions;
pub mod config;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod eval;
pub mod ltv1;
pub mod rng;
pub mod streaming;
pub mod student;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Frames, LatentVideo};
