use nalgebra::{DMatrix, DVector};

use crate::data::LinearSystem;
use crate::error::{Error, Result};
use crate::gp::Gaussian;
use crate::tensor::Array;

/// Per-step marginals of a linear-Gaussian system.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanResult {
    /// `p(x_t | y_{1:t-1})`
    pub predicted: Vec<Gaussian>,
    /// `p(x_t | y_{1:t})`
    pub filtered: Vec<Gaussian>,
    /// `p(x_t | y_{1:T})`
    pub smoothed: Vec<Gaussian>,
    /// `log p(y_{1:T})`
    pub log_likelihood: f64,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Measurement update with observation matrix `c` and noise `r`
/// (Joseph-form covariance). Returns the posterior and `log N(y; ŷ, S)`.
pub fn kalman_update(
    prior: &Gaussian,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(Gaussian, f64)> {
    let p = prior.cov_matrix();
    let s = symmetrize(c * &p * c.transpose() + r);
    let chol = s
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let gain = chol.solve(&(c * &p)).transpose();
    let innovation = y - c * &prior.mean;
    let mean = &prior.mean + &gain * &innovation;
    let n = p.nrows();
    let keep = DMatrix::identity(n, n) - &gain * c;
    let cov = symmetrize(&keep * &p * keep.transpose() + &gain * r * gain.transpose());
    let d = y.len() as f64;
    let maha = innovation.dot(&chol.solve(&innovation));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * (maha + logdet + d * (2.0 * std::f64::consts::PI).ln());
    Ok((Gaussian::full(mean, cov)?, ll))
}

/// Time update `N(A μ + B u, A Σ Aᵀ + Q)`.
pub fn kalman_predict(sys: &LinearSystem, g: &Gaussian, u: &DVector<f64>) -> Result<Gaussian> {
    let p = g.cov_matrix();
    Gaussian::full(
        &sys.a * &g.mean + &sys.b * u,
        symmetrize(&sys.a * p * sys.a.transpose() + &sys.q),
    )
}

fn row(a: &Array, t: usize) -> DVector<f64> {
    DVector::from_row_slice(a.row(t))
}

/// Kalman filter followed by a Rauch-Tung-Striebel smoother; `prior` is the
/// distribution of the first state.
pub fn kalman_filter_smoother(
    sys: &LinearSystem,
    prior: &Gaussian,
    y: &Array,
    u: &Array,
) -> Result<KalmanResult> {
    let len = y.rows();
    if u.rows() != len || y.cols() != sys.dy() || u.cols() != sys.du() || prior.dim() != sys.dx() {
        return Err(Error::Shape("data and system dimensions disagree".into()));
    }
    let mut predicted = Vec::with_capacity(len);
    let mut filtered: Vec<Gaussian> = Vec::with_capacity(len);
    let mut log_likelihood = 0.0;
    let mut pred = prior.clone();
    for t in 0..len {
        let (post, ll) = kalman_update(&pred, &row(y, t), &sys.c, &sys.r)?;
        log_likelihood += ll;
        predicted.push(pred);
        if t + 1 < len {
            pred = kalman_predict(sys, &post, &row(u, t))?;
        } else {
            pred = post.clone();
        }
        filtered.push(post);
    }
    let mut smoothed = vec![filtered[len - 1].clone(); len];
    for t in (0..len.saturating_sub(1)).rev() {
        let pf = filtered[t].cov_matrix();
        let pp = predicted[t + 1].cov_matrix();
        // G = P_f Aᵀ P_p⁻¹, via a pseudo-inverse so that singular predictions
        // (Q = 0 with a point-mass prior) stay usable
        let pp_inv = pp
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidArgument(e.into()))?;
        let g = &pf * sys.a.transpose() * pp_inv;
        let mean = &filtered[t].mean + &g * (&smoothed[t + 1].mean - &predicted[t + 1].mean);
        let cov = symmetrize(&pf + &g * (smoothed[t + 1].cov_matrix() - &pp) * g.transpose());
        smoothed[t] = Gaussian::full(mean, cov)?;
    }
    Ok(KalmanResult {
        predicted,
        filtered,
        smoothed,
        log_likelihood,
    })
}

/// Open-loop state predictions `p(x_t | x_1 ~ init, u_{1:t-1})`.
pub fn kalman_open_loop(sys: &LinearSystem, init: &Gaussian, u: &Array) -> Result<Vec<Gaussian>> {
    let mut out = vec![init.clone()];
    for t in 1..u.rows() {
        let next = kalman_predict(sys, &out[t - 1], &row(u, t - 1))?;
        out.push(next);
    }
    Ok(out)
}
