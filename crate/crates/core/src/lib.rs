//! Divergence-based deep clustering.
//!
//! An unsupervised clustering network trained end to end by gradient
//! descent: soft cluster assignments come from a softmax output layer, a
//! Gaussian kernel matrix over a designated hidden layer estimates cluster
//! densities, and the loss combines an averaged pairwise Cauchy-Schwarz
//! ratio between those densities with two simplex-geometry regularizers.
//! The crate bundles the reverse-mode autodiff core everything is built on,
//! the two reference architectures, the training and ensembling loop, and
//! the evaluation metrics (NMI, best-matching accuracy, Hungarian solver).
//!
//! All numeric code is generic over the scalar type: `f32` for training,
//! `f64` for gradient verification.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernel;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision tensor used for training.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;

pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;

pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;

pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;

pub type RunResult32 = trainer::RunResult<f32>;
