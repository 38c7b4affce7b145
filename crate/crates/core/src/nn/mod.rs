//! Activations, layers and the sequential model builder.

pub mod activation;
pub mod layers;
pub mod model;
pub mod probact;

pub use activation::Activation;
pub use layers::BatchNormState;
pub use model::{build_model, LayerSpec, Model, ModelOptions, ModelSpec};
pub use probact::{
    bounded_sigma, probact_backward, probact_forward, EvalMode, Granularity, NoiseRecord, Phase, ProbActConfig,
    SigmaMode,
};
