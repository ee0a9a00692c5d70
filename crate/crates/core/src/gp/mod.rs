//! Kernels, exact and sparse GP prediction, Gaussian divergences.

mod exact;
mod gaussian;
mod kernel;
mod mean;
mod sparse;

pub use exact::gp_posterior;
pub use gaussian::{gaussian_kl, Covariance, Gaussian};
pub use kernel::{se_kernel_var, SeKernel};
pub use mean::MeanFunction;
pub use sparse::{GpInit, GpOutput, GpOutputVars, GpVars, InducingMode, PreparedGp, SparseGp};
