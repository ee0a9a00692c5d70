use nalgebra::{DMatrix, DVector};

use super::{Gaussian, MeanFunction, SeKernel};
use crate::error::{Error, Result};
use crate::tensor::{linalg, Array};

/// Noise-free GP posterior at `x_query` given `f(x) = fx`.
///
/// `mean_output` picks the output of a multi-output mean function.
pub fn gp_posterior(
    kernel: &SeKernel,
    mean_fn: &MeanFunction,
    mean_output: usize,
    x: &Array,
    fx: &[f64],
    x_query: &Array,
) -> Result<Gaussian> {
    if x.rows() != fx.len() {
        return Err(Error::Shape(format!(
            "{} inputs with {} targets",
            x.rows(),
            fx.len()
        )));
    }
    let q = x_query.rows();
    let prior_mean = mean_fn.eval(x_query, mean_output);
    let k_qq = kernel.matrix(x_query, x_query)?;
    if x.rows() == 0 {
        return Gaussian::full(
            DVector::from_vec(prior_mean),
            k_qq.to_dmatrix(),
        );
    }
    let k_xx = kernel.matrix(x, x)?;
    let k_xq = kernel.matrix(x, x_query)?;
    let m_x = mean_fn.eval(x, mean_output);
    let resid: Vec<f64> = fx.iter().zip(&m_x).map(|(f, m)| f - m).collect();
    let (l, _) = linalg::cholesky(&k_xx)?;
    let alpha = linalg::solve_lower(
        &l,
        &linalg::solve_lower(&l, &Array::matrix(resid.len(), 1, resid), false)?,
        true,
    )?;
    let mean = linalg::matmul(&linalg::transpose(&k_xq), &alpha)?;
    let w = linalg::solve_lower(&l, &k_xq, false)?;
    let reduction = linalg::matmul(&linalg::transpose(&w), &w)?;
    let mut cov = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            cov[(i, j)] = k_qq.at(i, j) - reduction.at(i, j);
        }
    }
    let mean = DVector::from_iterator(q, (0..q).map(|i| prior_mean[i] + mean.at(i, 0)));
    Gaussian::full(mean, cov)
}
