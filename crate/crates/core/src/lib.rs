//! Weakly-supervised object localization with a small vision transformer.
//!
//! The crate covers the whole pipeline: a dense-tensor reverse-mode engine
//! ([`autodiff`]), a ViT backbone with patch attention dropout ([`model`],
//! [`padl`]), attention-rollout attribution maps ([`attribution`]), the box
//! accuracy metrics ([`metrics`]), a synthetic shapes dataset ([`dataset`]) and
//! the training/evaluation loop ([`trainer`]).

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod image_io;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod padl;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorStack};
