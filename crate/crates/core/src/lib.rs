//! sharpness-core: tensors, reverse-mode autodiff, SAM/ASAM optimizers,
//! scale-invariant sharpness measures and rank-correlation statistics.
//!
//! Everything numerical is generic over the scalar type (f32 or f64) through
//! [`scalar::Scalar`]; the `*64` aliases at the crate root pin the f64
//! instantiations the command-line harness works with.

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod normops;
pub mod optim;
pub mod scalar;
pub mod sharpness;
pub mod tensor;
pub mod vecops;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 instantiations used throughout the harness.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type ParameterVector64 = models::ParameterVector<f64>;
pub type NormalizationOperator64 = normops::NormalizationOperator<f64>;
pub type PerturbationConfig64 = normops::PerturbationConfig<f64>;
pub type OptimizerState64 = optim::OptimizerState<f64>;
pub type SharpnessReport64 = sharpness::SharpnessReport<f64>;
pub type BoundInputs64 = analysis::BoundInputs<f64>;
pub type MeasureGapPair64 = analysis::MeasureGapPair<f64>;
pub type HyperGrid64 = analysis::HyperGrid<f64>;
