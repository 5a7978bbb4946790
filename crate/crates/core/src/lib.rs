//! Residual shifted-window vision transformer (RSwinV2) for multi-class
//! skin-lesion image classification.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]) and builds the network from it: patch embedding, windowed
//! multi-head attention with cyclic shifts, and an inverted residual block in
//! place of the transformer feed-forward layer. Training, evaluation metrics
//! and a PCA view of learned features sit on top.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inverse_residual;
pub mod params;
pub mod patch_embedding;
pub mod seed;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod metrics;
pub mod model;
pub mod window_attention;

pub use autodiff::{Graph, Var};
pub use config::{ClsMode, ModelConfig, Precision, SublayerKind};
pub use error::{CheckpointError, Error, Result};
pub use tensor::{Scalar, Tensor};
