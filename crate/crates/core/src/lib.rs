//! Variational inference for Gaussian-process state-space models.
//!
//! The crate covers three approximate posteriors over latent trajectories:
//! prior-rollout (PR-SSM), one-step filtering (VCDT) and the
//! conditional backward-forward smoother (CBF-SSM) with softened Kalman
//! conditioning. Everything differentiable runs on the small reverse-mode
//! tape in [`tensor`].

pub mod data;
pub mod error;
pub mod gp;
pub mod inference;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
