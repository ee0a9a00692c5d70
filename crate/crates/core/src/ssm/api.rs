//! Single-sample versions of the state-space primitives on plain vectors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::{RecognitionModule, SsmModel};
use super::step;
use crate::error::{Error, Result};
use crate::gp::{Covariance, Gaussian, InducingMode};
use crate::tensor::{Array, Tape};

/// How the transition function is drawn during a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// Integrate `q(u)` out independently at every step.
    IndependentPerStep,
    /// Draw one `u ~ q(u)` per trajectory and condition on it.
    SampledInducingPerTrajectory,
    /// Condition on the mean of `q(u)`.
    MeanInducing,
}

/// Per-trajectory state of the transition function for [`SsmModel::forward_prior`].
#[derive(Clone, Debug, PartialEq)]
pub enum FunctionSample {
    Independent,
    /// Standard-normal draws (`M×1` per GP output) defining `u = μ + L_q ε`.
    Inducing(Vec<Array>),
    Mean,
}

impl FunctionSample {
    pub fn strategy(&self) -> SamplingStrategy {
        match self {
            FunctionSample::Independent => SamplingStrategy::IndependentPerStep,
            FunctionSample::Inducing(_) => SamplingStrategy::SampledInducingPerTrajectory,
            FunctionSample::Mean => SamplingStrategy::MeanInducing,
        }
    }
}

/// Soft Kalman update of `prior` towards a pseudo-observation of the full
/// state:
/// `K = Σ⁻(Σ̃ + kΣ⁻)⁻¹`, `μ = μ⁻ + K(ỹ − μ⁻)`,
/// `Σ = (I−K)Σ⁻(I−K)ᵀ + KΣ̃Kᵀ`.
pub fn soft_condition(
    prior: &Gaussian,
    pseudo_obs: &DVector<f64>,
    pseudo_cov: &Covariance,
    k: f64,
) -> Result<Gaussian> {
    if !(k >= 1.0) {
        return Err(Error::InvalidArgument(format!("soft factor k must be ≥ 1, got {k}")));
    }
    let d = prior.dim();
    let noise = match pseudo_cov {
        Covariance::Full(m) => m.clone(),
        Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
    };
    if pseudo_obs.len() != d || noise.nrows() != d {
        return Err(Error::Shape(format!(
            "prior of dimension {d}, pseudo-observation of dimension {}",
            pseudo_obs.len()
        )));
    }
    let sigma = prior.cov_matrix();
    let s = &noise + &sigma * k;
    let chol = s
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    // S symmetric: K = Σ⁻S⁻¹ = (S⁻¹Σ⁻)ᵀ
    let gain = chol.solve(&sigma).transpose();
    let mean = &prior.mean + &gain * (pseudo_obs - &prior.mean);
    let keep = DMatrix::identity(d, d) - &gain;
    let cov = &keep * &sigma * keep.transpose() + &gain * &noise * gain.transpose();
    Gaussian::full(mean, (&cov + cov.transpose()) * 0.5)
}

impl RecognitionModule {
    /// `q(x₁ | y_{1:t'}, u_{1:t'})`.
    pub fn recognize(&self, y: &Array, u: &Array) -> Result<Gaussian> {
        let features = Self::features(self.lag, y, u)?;
        let (mean, var) = self.map.apply(&features)?;
        Gaussian::diagonal(DVector::from_vec(mean), DVector::from_vec(var))
    }
}

impl SsmModel {
    /// Distribution of `y = Cx + v` for a Gaussian state.
    pub fn observe(&self, x: &Gaussian) -> Result<Gaussian> {
        let (dx, dy) = (self.dims.x, self.dims.y);
        if x.dim() != dx {
            return Err(Error::Shape(format!("state of dimension {} for d_x={dx}", x.dim())));
        }
        let noise = DVector::from_vec(self.obs_noise());
        let mean = x.mean.rows(0, dy).into_owned();
        match &x.cov {
            Covariance::Diagonal(v) => Gaussian::diagonal(mean, v.rows(0, dy) + noise),
            Covariance::Full(m) => Gaussian::full(
                mean,
                m.view((0, 0), (dy, dy)).into_owned() + DMatrix::from_diagonal(&noise),
            ),
        }
    }

    /// `p(x_{t+1} | x_t, u_t)` for one concrete state under a function sample.
    pub fn forward_prior(&self, sample: &FunctionSample, x: &[f64], u: &[f64]) -> Result<Gaussian> {
        self.check_input(x.len(), u.len())?;
        let tape = Tape::unchecked();
        let vars = self.bind(&tape);
        let gp = vars.forward.prepare();
        let mode = match sample {
            FunctionSample::Independent => InducingMode::Marginal,
            FunctionSample::Mean => InducingMode::Mean,
            FunctionSample::Inducing(eps) => {
                if eps.len() != self.dims.x {
                    return Err(Error::InvalidArgument(format!(
                        "{} inducing draws for {} outputs",
                        eps.len(),
                        self.dims.x
                    )));
                }
                InducingMode::Sampled(gp.sample_inducing(eps))
            }
        };
        let xv = tape.constant(Array::matrix(1, x.len(), x.to_vec()));
        let uv = tape.constant(Array::matrix(1, u.len(), u.to_vec()));
        let out = step::transition(&gp, xv, Some(uv), &mode, vars.log_process_noise.exp());
        tape.status()?;
        Gaussian::diagonal(
            DVector::from_vec(out.mean.value().into_data()),
            DVector::from_vec(out.var.value().into_data()),
        )
    }

    /// `x̃_t` given `x̃_{t+1}`, `u_t` and `y_t`: the observed components are
    /// clamped to `y_t` with zero variance, the hidden ones follow the
    /// backward GP with `q(u_b)` marginalized.
    pub fn backward_step(&self, x_next: &[f64], u: &[f64], y: &[f64]) -> Result<Gaussian> {
        self.check_input(x_next.len(), u.len())?;
        let (dx, dy) = (self.dims.x, self.dims.y);
        if y.len() != dy {
            return Err(Error::Shape(format!("observation of dimension {} for d_y={dy}", y.len())));
        }
        let mut mean = y.to_vec();
        let mut var = vec![0.0; dy];
        if dx > dy {
            let tape = Tape::unchecked();
            let vars = self.bind(&tape);
            let gp = vars.backward.prepare();
            let input = tape.constant(Array::matrix(
                1,
                dx + u.len(),
                x_next.iter().chain(u).copied().collect(),
            ));
            for (m, v) in gp.predict(input, &InducingMode::Marginal) {
                mean.push(m.item());
                var.push(v.item());
            }
            tape.status()?;
        }
        Gaussian::diagonal(DVector::from_vec(mean), DVector::from_vec(var))
    }

    /// Pseudo-observation covariance for conditioning on a backward-pass
    /// state with per-component variance `backward_var`.
    pub fn pseudo_covariance(&self, backward_var: &[f64]) -> Covariance {
        let floor = self.pseudo_noise();
        Covariance::Diagonal(DVector::from_iterator(
            floor.len(),
            floor.iter().zip(backward_var).map(|(f, v)| f + v),
        ))
    }

    fn check_input(&self, dx: usize, du: usize) -> Result<()> {
        if dx != self.dims.x || du != self.dims.u {
            return Err(Error::Shape(format!(
                "state/control of dimension {dx}/{du}, model expects {}/{}",
                self.dims.x, self.dims.u
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{Dims, ModelConfig};
    use approx::assert_relative_eq;

    fn scalar(m: f64, v: f64) -> Gaussian {
        Gaussian::diagonal(DVector::from_vec(vec![m]), DVector::from_vec(vec![v])).unwrap()
    }

    #[test]
    fn unit_gain_symmetric_case() {
        let post = soft_condition(
            &scalar(1.0, 2.0),
            &DVector::from_vec(vec![3.0]),
            &Covariance::Diagonal(DVector::from_vec(vec![2.0])),
            1.0,
        )
        .unwrap();
        assert_relative_eq!(post.mean[0], 2.0);
        assert_relative_eq!(post.cov_matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn huge_k_leaves_prior() {
        let prior = scalar(0.4, 1.3);
        let post = soft_condition(
            &prior,
            &DVector::from_vec(vec![10.0]),
            &Covariance::Diagonal(DVector::from_vec(vec![0.1])),
            1e9,
        )
        .unwrap();
        assert_relative_eq!(post.mean[0], 0.4, max_relative = 1e-6);
        assert_relative_eq!(post.cov_matrix()[(0, 0)], 1.3, max_relative = 1e-6);
    }

    #[test]
    fn k_below_one_is_rejected() {
        let r = soft_condition(
            &scalar(0.0, 1.0),
            &DVector::from_vec(vec![0.0]),
            &Covariance::Diagonal(DVector::from_vec(vec![1.0])),
            0.5,
        );
        assert!(r.is_err());
    }

    fn model(dims: Dims) -> SsmModel {
        let z = Array::matrix(
            3,
            dims.gp_input(),
            (0..3 * dims.gp_input()).map(|i| (i as f64 * 0.71).sin()).collect(),
        );
        SsmModel::new(dims, &ModelConfig::default(), z).unwrap()
    }

    #[test]
    fn observe_selects_and_adds_noise() {
        let mut m = model(Dims::new(3, 2, 0).unwrap());
        m.log_obs_noise = Array::from_vec(vec![0.5f64.ln(), 0.25f64.ln()]);
        let x = Gaussian::diagonal(
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DVector::from_vec(vec![0.1, 0.2, 0.3]),
        )
        .unwrap();
        let y = m.observe(&x).unwrap();
        assert_eq!(y.mean.as_slice(), &[1.0, 2.0]);
        assert_relative_eq!(y.variances()[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(y.variances()[1], 0.45, epsilon = 1e-15);
    }

    #[test]
    fn recognition_zero_map_is_standard_normal() {
        let m = model(Dims::new(2, 1, 1).unwrap());
        let mut rec = m.recognition.clone();
        rec.map = super::super::AffineGaussian::zeros(2, rec.map.features());
        let g = rec
            .recognize(&Array::zeros(&[6, 1]), &Array::zeros(&[6, 1]))
            .unwrap();
        assert_eq!(g.mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(g.variances().as_slice(), &[1.0, 1.0]);
        assert!(rec
            .recognize(&Array::zeros(&[2, 1]), &Array::zeros(&[2, 1]))
            .is_err());
    }

    #[test]
    fn backward_step_clamps_observed_components() {
        let m = model(Dims::new(2, 2, 1).unwrap());
        let g = m.backward_step(&[0.3, 0.4], &[1.0], &[5.0, 6.0]).unwrap();
        assert_eq!(g.mean.as_slice(), &[5.0, 6.0]);
        assert_eq!(g.variances().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_prior_dimension_errors() {
        let m = model(Dims::new(2, 1, 1).unwrap());
        assert!(m.forward_prior(&FunctionSample::Mean, &[0.0], &[0.0]).is_err());
        assert!(m
            .forward_prior(&FunctionSample::Inducing(vec![]), &[0.0, 0.0], &[0.0])
            .is_err());
    }
}
