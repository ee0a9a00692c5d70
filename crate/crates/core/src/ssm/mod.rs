//! GP state-space model: parameters, transition and observation models,
//! recognition, backward model and soft conditioning.

mod api;
mod model;
pub mod step;

pub use api::{soft_condition, FunctionSample, SamplingStrategy};
pub use model::{AffineGaussian, Dims, ModelConfig, ModelVars, RecognitionModule, SsmModel};
