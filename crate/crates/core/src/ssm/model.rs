use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpInit, GpVars, MeanFunction, SparseGp};
use crate::tensor::{Array, LeafId, Tape, Var};

/// State, observation and control dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub u: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, u: usize) -> Result<Self> {
        if x == 0 || y == 0 || y > x {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_y ≤ d_x, got d_x={x}, d_y={y}"
            )));
        }
        Ok(Self { x, y, u })
    }

    /// Number of unobserved state components.
    pub fn hidden(&self) -> usize {
        self.x - self.y
    }

    pub fn gp_input(&self) -> usize {
        self.x + self.u
    }
}

/// Affine map from a feature vector to a diagonal Gaussian:
/// `[mean, log-variance] = W φ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineGaussian {
    pub weight: Array,
    pub bias: Array,
}

impl AffineGaussian {
    pub fn zeros(out: usize, features: usize) -> Self {
        Self {
            weight: Array::zeros(&[2 * out, features]),
            bias: Array::zeros(&[2 * out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len() / 2
    }

    pub fn features(&self) -> usize {
        self.weight.cols()
    }

    /// Mean and variance for one feature vector.
    pub fn apply(&self, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if features.len() != self.features() {
            return Err(Error::Shape(format!(
                "{} features for a map expecting {}",
                features.len(),
                self.features()
            )));
        }
        let d = self.out_dim();
        let out: Vec<f64> = (0..2 * d)
            .map(|i| {
                self.bias.data()[i]
                    + self
                        .weight
                        .row(i)
                        .iter()
                        .zip(features)
                        .map(|(w, f)| w * f)
                        .sum::<f64>()
            })
            .collect();
        Ok((out[..d].to_vec(), out[d..].iter().map(|l| l.exp()).collect()))
    }
}

/// Recognition module: `q(x₁ | y_{1:t'}, u_{1:t'})` as an affine map of the
/// first `lag` observations and controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionModule {
    pub lag: usize,
    pub map: AffineGaussian,
}

impl RecognitionModule {
    /// Feature layout: `y_1, …, y_lag, u_1, …, u_lag`.
    pub fn features(lag: usize, y: &Array, u: &Array) -> Result<Vec<f64>> {
        if y.rows() < lag || u.rows() < lag {
            return Err(Error::InvalidArgument(format!(
                "recognition needs {lag} steps, got {}",
                y.rows().min(u.rows())
            )));
        }
        let mut f = Vec::with_capacity(lag * (y.cols() + u.cols()));
        for t in 0..lag {
            f.extend_from_slice(y.row(t));
        }
        for t in 0..lag {
            f.extend_from_slice(u.row(t));
        }
        Ok(f)
    }
}

/// Knobs for [`SsmModel::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_inducing: usize,
    pub lag: usize,
    /// Use `f(x, u) ≈ x + residual` as the prior mean of both GPs.
    pub identity_mean: bool,
    pub kernel_variance: f64,
    pub kernel_lengthscale: f64,
    pub inducing_std: f64,
    pub process_noise: f64,
    pub obs_noise: f64,
    pub pseudo_noise: f64,
    pub recognition_var: f64,
    pub init_prior_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_inducing: 20,
            lag: 5,
            identity_mean: false,
            kernel_variance: 1.0,
            kernel_lengthscale: 1.0,
            inducing_std: 1e-2,
            process_noise: 1e-2,
            obs_noise: 1e-1,
            pseudo_noise: 1e-2,
            recognition_var: 1e-1,
            init_prior_var: 10.0,
        }
    }
}

/// Learnable GP state-space model with its forward and backward GPs.
///
/// The observation matrix is fixed to `C = [I 0]`: the first `d_y` state
/// components are observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmModel {
    pub dims: Dims,
    /// Transition GP over `(x_t, u_t)`, one output per state component.
    pub forward: SparseGp,
    /// Backward GP over `(x̃_{t+1}, u_t)`, one output per hidden component.
    pub backward: SparseGp,
    pub log_process_noise: Array,
    pub log_obs_noise: Array,
    pub log_pseudo_noise: Array,
    pub recognition: RecognitionModule,
    /// `q(x̃_T | y_T)` for the hidden components.
    pub backward_init: AffineGaussian,
    /// Variance of the broad zero-mean prior `p(x₁)`.
    pub init_prior_var: f64,
    pub k_soft: f64,
    pub beta: f64,
}

impl SsmModel {
    /// Builds a model; `inducing` holds the initial forward inducing inputs
    /// (`M × (d_x + d_u)`), reused for the backward GP.
    pub fn new(dims: Dims, config: &ModelConfig, inducing: Array) -> Result<Self> {
        if inducing.cols() != dims.gp_input() {
            return Err(Error::Shape(format!(
                "inducing inputs need {} columns, got {}",
                dims.gp_input(),
                inducing.cols()
            )));
        }
        if config.lag == 0 {
            return Err(Error::InvalidArgument("recognition lag must be positive".into()));
        }
        let init = GpInit {
            variance: config.kernel_variance,
            lengthscale: config.kernel_lengthscale,
            q_std: config.inducing_std,
        };
        let (fwd_mean, bwd_mean) = if config.identity_mean {
            (
                MeanFunction::Identity {
                    columns: (0..dims.x).collect(),
                },
                MeanFunction::Identity {
                    columns: (dims.y..dims.x).collect(),
                },
            )
        } else {
            (MeanFunction::Zero, MeanFunction::Zero)
        };
        let forward = SparseGp::new(dims.x, inducing.clone(), fwd_mean, init)?;
        let backward = SparseGp::new(dims.hidden(), inducing, bwd_mean, init)?;

        let features = config.lag * (dims.y + dims.u);
        let mut recognition = AffineGaussian::zeros(dims.x, features);
        // start from x₁ ≈ [y₁, 0]
        for i in 0..dims.y {
            recognition.weight.set(i, i, 1.0);
        }
        for i in 0..dims.x {
            recognition.bias.data_mut()[dims.x + i] = config.recognition_var.ln();
        }
        let backward_init = AffineGaussian::zeros(dims.hidden(), dims.y);

        Ok(Self {
            dims,
            forward,
            backward,
            log_process_noise: Array::filled(&[dims.x], config.process_noise.ln()),
            log_obs_noise: Array::filled(&[dims.y], config.obs_noise.ln()),
            log_pseudo_noise: Array::filled(&[dims.x], config.pseudo_noise.ln()),
            recognition: RecognitionModule {
                lag: config.lag,
                map: recognition,
            },
            backward_init,
            init_prior_var: config.init_prior_var,
            k_soft: 1.0,
            beta: 1.0,
        })
    }

    pub fn process_noise(&self) -> Vec<f64> {
        self.log_process_noise.data().iter().map(|v| v.exp()).collect()
    }

    pub fn obs_noise(&self) -> Vec<f64> {
        self.log_obs_noise.data().iter().map(|v| v.exp()).collect()
    }

    pub fn pseudo_noise(&self) -> Vec<f64> {
        self.log_pseudo_noise.data().iter().map(|v| v.exp()).collect()
    }

    /// Every learnable array, in binding order.
    pub fn params(&self) -> Vec<&Array> {
        let mut v = self.forward.params();
        v.extend(self.backward.params());
        v.extend([
            &self.log_process_noise,
            &self.log_obs_noise,
            &self.log_pseudo_noise,
            &self.recognition.map.weight,
            &self.recognition.map.bias,
            &self.backward_init.weight,
            &self.backward_init.bias,
        ]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut v = self.forward.params_mut();
        v.extend(self.backward.params_mut());
        v.extend([
            &mut self.log_process_noise,
            &mut self.log_obs_noise,
            &mut self.log_pseudo_noise,
            &mut self.recognition.map.weight,
            &mut self.recognition.map.bias,
            &mut self.backward_init.weight,
            &mut self.backward_init.bias,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|a| a.len()).sum()
    }

    /// Records every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        let forward = self.forward.bind(tape);
        let backward = self.backward.bind(tape);
        ModelVars {
            dims: self.dims,
            forward,
            backward,
            log_process_noise: tape.leaf(self.log_process_noise.clone()),
            log_obs_noise: tape.leaf(self.log_obs_noise.clone()),
            log_pseudo_noise: tape.leaf(self.log_pseudo_noise.clone()),
            rec_weight: tape.leaf(self.recognition.map.weight.clone()),
            rec_bias: tape.leaf(self.recognition.map.bias.clone()),
            binit_weight: tape.leaf(self.backward_init.weight.clone()),
            binit_bias: tape.leaf(self.backward_init.bias.clone()),
            lag: self.recognition.lag,
            init_prior_var: self.init_prior_var,
        }
    }
}

/// An [`SsmModel`] whose parameters are leaves of a tape.
pub struct ModelVars<'t> {
    pub dims: Dims,
    pub forward: GpVars<'t>,
    pub backward: GpVars<'t>,
    pub log_process_noise: Var<'t>,
    pub log_obs_noise: Var<'t>,
    pub log_pseudo_noise: Var<'t>,
    pub rec_weight: Var<'t>,
    pub rec_bias: Var<'t>,
    pub binit_weight: Var<'t>,
    pub binit_bias: Var<'t>,
    pub lag: usize,
    pub init_prior_var: f64,
}

impl<'t> ModelVars<'t> {
    /// Leaf ids in [`SsmModel::params`] order.
    pub fn leaf_ids(&self) -> Vec<LeafId> {
        let mut ids = self.forward.leaf_ids();
        ids.extend(self.backward.leaf_ids());
        ids.extend(
            [
                self.log_process_noise,
                self.log_obs_noise,
                self.log_pseudo_noise,
                self.rec_weight,
                self.rec_bias,
                self.binit_weight,
                self.binit_bias,
            ]
            .iter()
            .filter_map(Var::leaf_id),
        );
        ids
    }
}
