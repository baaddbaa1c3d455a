//! Metric-learning based zero-shot classification with hard negative
//! mining.
//!
//! Images are embedded into attribute space by a linear map with a ReLU,
//! and compared to attribute vectors through a learned metric. Training
//! pairs each image with its own attributes (positives) and with
//! attributes from other seen classes (negatives); three strategies
//! control how negatives are sampled and grown across epochs. Unseen-class
//! images are classified by the nearest class descriptor in the learned
//! metric.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod mining;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used throughout training, mining and evaluation.
pub type Real = f64;

/// Model parameters at the default precision.
pub type Model = model::ModelParameters<Real>;

/// A training pair at the default precision.
pub type TrainingPair = model::Pair<Real>;
