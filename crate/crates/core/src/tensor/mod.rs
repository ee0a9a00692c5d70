//! Dense arrays with a recording tape for reverse-mode differentiation.
//!
//! Only scalar-tensor and matching-shape elementwise broadcasting is
//! supported. Matrix-valued primitives include Cholesky factorization and
//! triangular solves, both differentiable.

mod array;
mod check;
pub mod linalg;
mod tape;

pub use array::Array;
pub use check::{fd_check, fd_gradient};
pub use linalg::cholesky_solve;
pub use tape::{GradientMap, LeafId, Program, Tape, Var};
