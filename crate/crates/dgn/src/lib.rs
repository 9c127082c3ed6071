//! Decomposed recipe generation: a structure predictor routes phases of a
//! recipe to specialized sub-generators that share a transformer trunk.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64` via
//! num-traits); the aliases below pin the default 64-bit precision used by
//! the pipeline and the gradient checks.

pub mod config;
pub mod corpus;
pub mod encoders;
pub mod generator;
pub mod gradcheck;
pub mod labeler;
pub mod metrics;
pub mod nn;
pub mod structure;
pub mod tensor;
pub mod training;

/// Default-precision tensor used throughout the pipeline.
pub type Tensor = tensor::Tensor<f64>;
pub type Model = training::DgnModel<f64>;
