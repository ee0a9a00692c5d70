use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{linalg, Array};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

/// Multivariate normal with full or diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl Gaussian {
    pub fn full(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape(format!(
                "mean of length {} with covariance {}×{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self {
            mean,
            cov: Covariance::Full(cov),
        })
    }

    pub fn diagonal(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(Error::Shape(format!(
                "mean of length {} with {} variances",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        Ok(Self {
            mean,
            cov: Covariance::Diagonal(var),
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: Covariance::Diagonal(DVector::from_element(dim, 1.0)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
        }
    }

    pub fn variances(&self) -> DVector<f64> {
        match &self.cov {
            Covariance::Full(m) => m.diagonal(),
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let d = self.dim();
        let diff = x - &self.mean;
        let (maha, logdet) = match &self.cov {
            Covariance::Diagonal(v) => (
                diff.iter().zip(v.iter()).map(|(e, s)| e * e / s).sum::<f64>(),
                v.iter().map(|s| s.ln()).sum::<f64>(),
            ),
            Covariance::Full(m) => {
                let a = Array::from_dmatrix(m);
                let (l, _) = linalg::cholesky(&a)?;
                let z = linalg::solve_lower(&l, &Array::from_dvector(&diff), false)?;
                let logdet = (0..d).map(|i| 2.0 * l.at(i, i).ln()).sum::<f64>();
                (z.data().iter().map(|v| v * v).sum(), logdet)
            }
        };
        Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + maha))
    }
}

/// Closed-form `KL(q ‖ p)` between two multivariate normals.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    let d = q.dim();
    if p.dim() != d {
        return Err(Error::Shape(format!("KL between dims {} and {}", d, p.dim())));
    }
    if let (Covariance::Diagonal(vq), Covariance::Diagonal(vp)) = (&q.cov, &p.cov) {
        let mut kl = 0.0;
        for i in 0..d {
            let diff = q.mean[i] - p.mean[i];
            kl += 0.5 * ((vp[i] / vq[i]).ln() + (vq[i] + diff * diff) / vp[i] - 1.0);
        }
        return Ok(kl);
    }
    let (lp, _) = linalg::cholesky(&Array::from_dmatrix(&p.cov_matrix()))?;
    let (lq, _) = linalg::cholesky(&Array::from_dmatrix(&q.cov_matrix()))?;
    // tr(Σp⁻¹Σq) = ‖Lp⁻¹ Lq‖²_F
    let m = linalg::solve_lower(&lp, &lq, false)?;
    let trace: f64 = m.data().iter().map(|v| v * v).sum();
    let diff = Array::from_dvector(&(&p.mean - &q.mean));
    let z = linalg::solve_lower(&lp, &diff, false)?;
    let maha: f64 = z.data().iter().map(|v| v * v).sum();
    let logdet_p: f64 = (0..d).map(|i| 2.0 * lp.at(i, i).ln()).sum();
    let logdet_q: f64 = (0..d).map(|i| 2.0 * lq.at(i, i).ln()).sum();
    Ok(0.5 * (trace + maha - d as f64 + logdet_p - logdet_q))
}
