//! Ternary-weight, low-bit-activation transformers with early exits.
//!
//! The crate is generic over the element type ([`Scalar`]: `f32` or `f64`).
//! Training and evaluation run in `f32`; the `f64` instantiation backs the
//! numerical oracles in the test suites.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hadamard;
mod kernels;
pub mod layers;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Graph = graph::Graph<f32>;
