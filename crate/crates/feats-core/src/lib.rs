//! FEATS: feature engineering machine with attention for time series.
//!
//! Builds interpretable scalar features from multivariate time-series
//! panels using attention heads (instance-wise softmax gates times
//! trainable scaling coefficients), combines them with GAM-net transforms
//! of static covariates, and fits simple downstream models — all trained
//! jointly on a reverse-mode tape. The `interpret` module turns fitted
//! heads into additive per-input attribution weights, variance
//! decompositions, and alignment tables; `datagen` provides the seeded
//! simulation studies and `experiment` the reproducible run harness.

pub mod data;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod interpret;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
