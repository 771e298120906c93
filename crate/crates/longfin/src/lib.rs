//! Long-context dual-stream document encoder with sparse attention,
//! masked visual-language pretraining, and entity extraction heads.
//!
//! The numeric core is generic over the scalar type (`f32` for training,
//! `f64` for gradient verification); `Tensor32`/`Tensor64` are the
//! concrete aliases most callers want.

pub mod cli;
pub mod config;
pub mod doc;
pub mod encode;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod mvlm;
pub mod optim;
pub mod params;
pub mod pattern;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use scalar::Scalar;
pub use tensor::{NumericError, NumericResult, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision graph.
pub type Graph32 = graph::Graph<f32>;
/// Verification-precision graph.
pub type Graph64 = graph::Graph<f64>;
