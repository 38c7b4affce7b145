//! Stochastic activation functions with fixed or trainable noise scale,
//! built on a small reverse-mode neural-network framework.
//!
//! - [`tensor`]: dense arrays and the counter-based Gaussian sampler
//! - [`autodiff`]: tape, parameters, finite-difference checker
//! - [`nn`]: activations (including the stochastic family), layers, model builder
//! - [`optim`]: SGD, Adam, step-decay schedule, checkpoints
//! - [`data`]: CIFAR binary loader, synthetic sets, stratified subsets, batching
//! - [`experiment`]: training runs, evaluation, metrics and exports

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{NoiseKey, Scalar, Tensor};
