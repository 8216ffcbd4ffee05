//! Knowledge-enhanced vision-language pre-training at desk scale.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*32`/`*64` aliases pick one.

pub mod data;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kb;
pub mod kge;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use kvlp_tensor::{Scalar, Tensor};
pub use model::{Model, Model32, Model64, ModelConfig};
