use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Var};

/// Squared-exponential kernel with one lengthscale per input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl SeKernel {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(variance > 0.0) || lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument(
                "kernel variance and lengthscales must be positive".into(),
            ));
        }
        Ok(Self {
            variance,
            lengthscales,
        })
    }

    pub fn from_log(log_variance: f64, log_lengthscales: &[f64]) -> Self {
        Self {
            variance: log_variance.exp(),
            lengthscales: log_lengthscales.iter().map(|l| l.exp()).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.variance * (-0.5 * r2).exp()
    }

    /// `K[i, j] = k(x_i, x2_j)`.
    pub fn matrix(&self, x: &Array, x2: &Array) -> Result<Array> {
        let d = self.input_dim();
        if x.cols() != d || x2.cols() != d {
            return Err(Error::Shape(format!(
                "kernel over {} inputs given {} and {} columns",
                d,
                x.cols(),
                x2.cols()
            )));
        }
        let (n, m) = (x.rows(), x2.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = self.eval(x.row(i), x2.row(j));
            }
        }
        Ok(Array::matrix(n, m, out))
    }
}

/// Kernel matrix on the tape from log-parameters.
///
/// `log_lengthscales` holds one entry per input column; `log_variance` is a
/// one-element var.
pub fn se_kernel_var<'t>(
    log_variance: Var<'t>,
    log_lengthscales: Var<'t>,
    x: Var<'t>,
    x2: Var<'t>,
) -> Var<'t> {
    let scale = (-log_lengthscales).exp().diag_embed();
    let d = x.matmul(scale).sqdist(x2.matmul(scale));
    (log_variance - d * 0.5).exp()
}
