//! Transformer-encoder classifier for scalar time series.
//!
//! A window of `l` observations is embedded as an `l x d` matrix, passed
//! through a stack of self-attention encoder blocks and mapped to a
//! probability vector over `k` buckets of the next value (or its square).
//! The crate also contains the Ornstein-Uhlenbeck data generator used to
//! produce series with a known conditional law, the windowing pipeline,
//! daily-price ingestion, the training loop and the entropy-based evaluation.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common use.

pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod market;
pub mod model;
pub mod numcore;
pub mod rng;
mod scalar;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numcore::Matrix<f64>;
pub type Matrix32 = numcore::Matrix<f32>;
pub type EncoderClassifier64 = model::EncoderClassifier<f64>;
pub type EncoderClassifier32 = model::EncoderClassifier<f32>;
pub type SequenceDataset64 = dataset::SequenceDataset<f64>;
pub type SequenceDataset32 = dataset::SequenceDataset<f32>;
