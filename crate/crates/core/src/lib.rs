//! Tools for studying how overparameterized linear models fit noisy candidate
//! labels: dataset handling, random convolutional features, full-batch
//! gradient descent with early stopping, the spectral residual predictor,
//! label-noise generators, train/test near-duplicate search and per-class
//! reporting.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common instantiations.

pub mod dataset;
pub mod dedup;
pub mod dynamics;
pub mod error;
pub mod featurizer;
pub mod linalg;
pub mod noise;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod synth;
#[cfg(test)]
mod testing;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FeatureMatrixF32 = featurizer::FeatureMatrix<f32>;
pub type FeatureMatrixF64 = featurizer::FeatureMatrix<f64>;
pub type FilterBankF32 = featurizer::RandomFilterBank<f32>;
pub type FilterBankF64 = featurizer::RandomFilterBank<f64>;
pub type TrainTraceF32 = trainer::TrainTrace<f32>;
pub type TrainTraceF64 = trainer::TrainTrace<f64>;
