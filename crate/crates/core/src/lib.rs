//! Multi-trial supervised independent component analysis.
//!
//! Jointly learns an invertible unmixing matrix and per-target predictive
//! models by block-coordinate descent with closed-form row updates. All
//! numerics are generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases
//! below are the configuration used by the CLI and the tests.

// `!(x > 0)` is used on purpose throughout so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod likelihood;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod solver;
pub mod supervision;
pub mod synth;
pub mod unmixing;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type UnmixingState64 = data::UnmixingState<f64>;
pub type UnmixingState32 = data::UnmixingState<f32>;
pub type AuxTensor64 = data::AuxTensor<f64>;
pub type MixingGroundTruth64 = data::MixingGroundTruth<f64>;
pub type Density64 = likelihood::SuperGaussianDensity<f64>;
pub type TargetModel64 = supervision::SupervisedTargetModel<f64>;
pub type FeatureMap64 = supervision::FeatureMap<f64>;
pub type FitResult64 = solver::FitResult<f64>;
pub type FitResult32 = solver::FitResult<f32>;
