//! Cluster-aware federated learning simulator.
//!
//! Clients are grouped by comparing how their local training moved the
//! classifier layer; each discovered cluster then contributes equally to
//! the aggregated model, and local training is regularised towards the
//! global model's representation geometry. A small theory module checks the
//! coverage-time and convergence claims behind the method.
//!
//! Core types are generic over the scalar (`f32`/`f64` through
//! [`Scalar`]); the coverage-time formulas accept exact rationals through
//! [`Exact`]. Concrete aliases for the common instantiations live at the
//! crate root.

// Validation uses `!(x >= 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod kd;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod similarity;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::{Exact, Scalar};

/// Arbitrary-precision rational for exact coverage-time evaluation.
pub type Rational = num_rational::BigRational;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type ModelParams64 = nn::ModelParams<f64>;
pub type ModelParams32 = nn::ModelParams<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type SimilarityState64 = similarity::SimilarityState<f64>;
pub type SimilarityState32 = similarity::SimilarityState<f32>;
pub type WeightVector64 = aggregation::WeightVector<f64>;
pub type Simulation64 = engine::Simulation<f64>;
pub type Simulation32 = engine::Simulation<f32>;
pub type QuadraticClient64 = theory::QuadraticClient<f64>;
