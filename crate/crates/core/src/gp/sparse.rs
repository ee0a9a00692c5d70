use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Gaussian, MeanFunction, SeKernel};
use crate::error::{Error, Result};
use crate::tensor::{linalg, Array, LeafId, Tape, Var};

/// Variational parameters and hyperparameters of one GP output.
///
/// `q(u)` is stored whitened: `u = m(z) + L_zz v` with `L_zz` the Cholesky
/// factor of `K_zz` and `v ~ N(q_mean, S S ᵀ)`. `S` is the strictly lower
/// part of `q_sqrt` plus `diag(exp(q_log_diag))`, so the covariance of
/// `q(u)` has the Cholesky factor `L_zz S` and is PSD by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpOutput {
    pub log_variance: Array,
    pub log_lengthscales: Array,
    pub q_mean: Array,
    pub q_sqrt: Array,
    pub q_log_diag: Array,
}

/// Sparse GP with independent outputs sharing one set of inducing inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGp {
    pub mean_fn: MeanFunction,
    pub inducing: Array,
    pub outputs: Vec<GpOutput>,
}

/// Initial hyperparameters for [`SparseGp::new`].
#[derive(Clone, Copy, Debug)]
pub struct GpInit {
    pub variance: f64,
    pub lengthscale: f64,
    /// Standard deviation of the initial inducing distribution.
    pub q_std: f64,
}

impl Default for GpInit {
    fn default() -> Self {
        Self {
            variance: 1.0,
            lengthscale: 1.0,
            q_std: 1e-2,
        }
    }
}

impl SparseGp {
    pub fn new(
        n_out: usize,
        inducing: Array,
        mean_fn: MeanFunction,
        init: GpInit,
    ) -> Result<Self> {
        let (m, d) = (inducing.rows(), inducing.cols());
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one inducing input".into()));
        }
        let inducing = inducing.reshape(vec![m, d])?;
        let outputs = (0..n_out)
            .map(|_| GpOutput {
                log_variance: Array::scalar(init.variance.ln()),
                log_lengthscales: Array::filled(&[d], init.lengthscale.ln()),
                q_mean: Array::zeros(&[m]),
                q_sqrt: Array::zeros(&[m, m]),
                q_log_diag: Array::filled(&[m], init.q_std.ln()),
            })
            .collect();
        let gp = Self {
            mean_fn,
            inducing,
            outputs,
        };
        gp.validate()?;
        Ok(gp)
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.cols()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Checks that the inducing inputs are pairwise distinct.
    pub fn validate(&self) -> Result<()> {
        let z = &self.inducing;
        for i in 0..z.rows() {
            for j in 0..i {
                let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2.sqrt() <= 1e-8 {
                    return Err(Error::InvalidArgument(format!(
                        "inducing inputs {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kernel(&self, j: usize) -> SeKernel {
        let o = &self.outputs[j];
        SeKernel::from_log(o.log_variance.item(), o.log_lengthscales.data())
    }

    fn q_factor(&self, j: usize) -> Array {
        let o = &self.outputs[j];
        let m = self.num_inducing();
        let mut l = Array::zeros(&[m, m]);
        for r in 0..m {
            for c in 0..r {
                l.set(r, c, o.q_sqrt.at(r, c));
            }
            l.set(r, r, o.q_log_diag.data()[r].exp());
        }
        l
    }

    fn prior_chol(&self, j: usize) -> Result<DMatrix<f64>> {
        let k = self.kernel(j).matrix(&self.inducing, &self.inducing)?;
        Ok(linalg::cholesky(&k)?.0.to_dmatrix())
    }

    /// The variational distribution `q(u)` of output `j`.
    pub fn q_u(&self, j: usize) -> Result<Gaussian> {
        let l = self.prior_chol(j)?;
        let factor = &l * self.q_factor(j).to_dmatrix();
        let m_z = DVector::from_vec(self.mean_fn.eval(&self.inducing, j));
        Ok(Gaussian {
            mean: m_z + &l * self.outputs[j].q_mean.to_dvector(),
            cov: super::Covariance::Full(&factor * factor.transpose()),
        })
    }

    /// The prior `p(u) = N(m(z), K_zz)` of output `j`.
    pub fn prior_u(&self, j: usize) -> Result<Gaussian> {
        let k = self.kernel(j).matrix(&self.inducing, &self.inducing)?;
        let mean = self.mean_fn.eval(&self.inducing, j);
        Gaussian::full(DVector::from_vec(mean), k.to_dmatrix())
    }

    /// Replaces `q(u)` of output `j` by `N(mean, cov)`.
    pub fn set_q_u(&mut self, j: usize, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
        let m = self.num_inducing();
        if mean.len() != m || cov.nrows() != m || cov.ncols() != m {
            return Err(Error::Shape("q(u) must match the inducing count".into()));
        }
        let l_zz = Array::from_dmatrix(&self.prior_chol(j)?);
        let m_z = self.mean_fn.eval(&self.inducing, j);
        let resid = Array::matrix(m, 1, (0..m).map(|i| mean[i] - m_z[i]).collect());
        let v_mean = linalg::solve_lower(&l_zz, &resid, false)?;
        // S Sᵀ = L⁻¹ Σ L⁻ᵀ
        let half = linalg::solve_lower(&l_zz, &Array::from_dmatrix(cov), false)?;
        let s_cov = linalg::transpose(&linalg::solve_lower(&l_zz, &linalg::transpose(&half), false)?);
        let sym = Array::from_dmatrix(&((s_cov.to_dmatrix() + s_cov.to_dmatrix().transpose()) * 0.5));
        let (l, _) = linalg::cholesky(&sym)?;
        let o = &mut self.outputs[j];
        o.q_mean = v_mean.reshape(vec![m])?;
        o.q_sqrt = l.clone().reshape(vec![m, m])?;
        o.q_log_diag = Array::from_vec((0..m).map(|i| l.at(i, i).ln()).collect());
        Ok(())
    }

    /// Predictive distribution of every output at `x_query`, marginalizing
    /// `q(u)`: mean `m(x) + A(μ − m_z)`, covariance `K_xx − A(K_zz − Σ)Aᵀ`
    /// with `A = K_xz K_zz⁻¹`.
    pub fn predict(&self, x_query: &Array) -> Result<Vec<Gaussian>> {
        if x_query.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "query with {} columns for a GP over {} inputs",
                x_query.cols(),
                self.input_dim()
            )));
        }
        let q = x_query.rows();
        let z = &self.inducing;
        let mut out = Vec::with_capacity(self.num_outputs());
        for j in 0..self.num_outputs() {
            let kern = self.kernel(j);
            let k_zz = kern.matrix(z, z)?;
            let k_zx = kern.matrix(z, x_query)?;
            let k_xx = kern.matrix(x_query, x_query)?;
            // Aᵀ = K_zz⁻¹ K_zx
            let a_t = linalg::cholesky_solve(&k_zz, &k_zx)?;
            let m_z = self.mean_fn.eval(z, j);
            let m_x = self.mean_fn.eval(x_query, j);
            let q_u = self.q_u(j)?;
            let resid: Vec<f64> = (0..m_z.len()).map(|i| q_u.mean[i] - m_z[i]).collect();
            let shift = linalg::matmul(
                &linalg::transpose(&a_t),
                &Array::matrix(resid.len(), 1, resid),
            )?;
            let mut middle = k_zz.to_dmatrix() - q_u.cov_matrix();
            middle = (&middle + middle.transpose()) * 0.5;
            let a_t_m = a_t.to_dmatrix();
            let reduction = a_t_m.transpose() * middle * &a_t_m;
            let cov = k_xx.to_dmatrix() - reduction;
            let mean = DVector::from_iterator(q, (0..q).map(|i| m_x[i] + shift.at(i, 0)));
            out.push(Gaussian::full(mean, cov)?);
        }
        Ok(out)
    }

    /// Sum over outputs of `KL(q(u) ‖ p(u))`.
    pub fn inducing_kl(&self) -> Result<f64> {
        let mut kl = 0.0;
        for j in 0..self.num_outputs() {
            kl += super::gaussian_kl(&self.q_u(j)?, &self.prior_u(j)?)?;
        }
        Ok(kl)
    }

    pub fn params(&self) -> Vec<&Array> {
        let mut v = vec![&self.inducing];
        for o in &self.outputs {
            v.extend([
                &o.log_variance,
                &o.log_lengthscales,
                &o.q_mean,
                &o.q_sqrt,
                &o.q_log_diag,
            ]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut v = vec![&mut self.inducing];
        for o in &mut self.outputs {
            v.extend([
                &mut o.log_variance,
                &mut o.log_lengthscales,
                &mut o.q_mean,
                &mut o.q_sqrt,
                &mut o.q_log_diag,
            ]);
        }
        v
    }

    /// Records every parameter as a leaf, in [`SparseGp::params`] order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> GpVars<'t> {
        let inducing = tape.leaf(self.inducing.clone());
        let outputs = self
            .outputs
            .iter()
            .map(|o| GpOutputVars {
                log_variance: tape.leaf(o.log_variance.clone()),
                log_lengthscales: tape.leaf(o.log_lengthscales.clone()),
                q_mean: tape.leaf(o.q_mean.clone()),
                q_sqrt: tape.leaf(o.q_sqrt.clone()),
                q_log_diag: tape.leaf(o.q_log_diag.clone()),
            })
            .collect();
        GpVars {
            mean_fn: self.mean_fn.clone(),
            inducing,
            outputs,
        }
    }
}

pub struct GpOutputVars<'t> {
    pub log_variance: Var<'t>,
    pub log_lengthscales: Var<'t>,
    pub q_mean: Var<'t>,
    pub q_sqrt: Var<'t>,
    pub q_log_diag: Var<'t>,
}

/// A [`SparseGp`] whose parameters live on a tape.
pub struct GpVars<'t> {
    pub mean_fn: MeanFunction,
    pub inducing: Var<'t>,
    pub outputs: Vec<GpOutputVars<'t>>,
}

/// How the inducing values enter a prediction.
pub enum InducingMode<'t> {
    /// Integrate `q(u)` out independently at every call.
    Marginal,
    /// Condition on `u = μ`.
    Mean,
    /// Condition on one sample of `u` per row; one `M×R` matrix per output
    /// holding `L_zz⁻¹ (u_r − m_z)` column-wise (see [`PreparedGp::sample_inducing`]).
    Sampled(Vec<Var<'t>>),
}

struct PreparedOutput<'t> {
    scale: Var<'t>,
    log_variance: Var<'t>,
    signal_var: Var<'t>,
    zs: Var<'t>,
    chol: Var<'t>,
    alpha: Var<'t>,
    /// Cholesky factor of the whitened inducing covariance
    proj: Var<'t>,
    proj_t: Var<'t>,
    q_log_diag: Var<'t>,
}

/// Per-evaluation quantities that depend only on the GP parameters.
pub struct PreparedGp<'t> {
    mean_fn: MeanFunction,
    num_inducing: usize,
    outputs: Vec<PreparedOutput<'t>>,
    tape: &'t Tape,
}

impl<'t> GpVars<'t> {
    pub fn leaf_ids(&self) -> Vec<LeafId> {
        let mut ids = vec![self.inducing.leaf_id()];
        for o in &self.outputs {
            ids.extend([
                o.log_variance.leaf_id(),
                o.log_lengthscales.leaf_id(),
                o.q_mean.leaf_id(),
                o.q_sqrt.leaf_id(),
                o.q_log_diag.leaf_id(),
            ]);
        }
        ids.into_iter().flatten().collect()
    }

    pub fn prepare(&self) -> PreparedGp<'t> {
        let tape = self.inducing.tape();
        let z = self.inducing;
        let m = z.rows();
        let mut strict = Array::zeros(&[m, m]);
        for r in 0..m {
            for c in 0..r {
                strict.set(r, c, 1.0);
            }
        }
        let strict = tape.constant(strict);
        let outputs = self
            .outputs
            .iter()
            .map(|o| {
                let scale = (-o.log_lengthscales).exp().diag_embed();
                let zs = z.matmul(scale);
                let k_zz = (o.log_variance - zs.sqdist(zs) * 0.5).exp();
                let chol = k_zz.cholesky();
                let alpha = o.q_mean;
                let proj = o.q_sqrt * strict + o.q_log_diag.exp().diag_embed();
                PreparedOutput {
                    scale,
                    log_variance: o.log_variance,
                    signal_var: o.log_variance.exp(),
                    zs,
                    chol,
                    alpha,
                    proj,
                    proj_t: proj.t(),
                    q_log_diag: o.q_log_diag,
                }
            })
            .collect();
        PreparedGp {
            mean_fn: self.mean_fn.clone(),
            num_inducing: m,
            outputs,
            tape,
        }
    }
}

impl<'t> PreparedGp<'t> {
    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Per-output `(mean, variance)` columns (`R×1` each) of `f` at the rows
    /// of `x`. The variance excludes any observation or process noise.
    pub fn predict(&self, x: Var<'t>, mode: &InducingMode<'t>) -> Vec<(Var<'t>, Var<'t>)> {
        self.outputs
            .iter()
            .enumerate()
            .map(|(j, o)| {
                let xs = x.matmul(o.scale);
                let k_xz = (o.log_variance - xs.sqdist(o.zs) * 0.5).exp();
                let w = o.chol.solve_lower(k_xz.t());
                let cond_var = o.signal_var - w.square().sum_rows().t();
                let (mean, var) = match mode {
                    InducingMode::Marginal => {
                        let q = o.proj_t.matmul(w);
                        (w.t().matmul(o.alpha), cond_var + q.square().sum_rows().t())
                    }
                    InducingMode::Mean => (w.t().matmul(o.alpha), cond_var),
                    InducingMode::Sampled(b) => ((w * b[j]).sum_rows().t(), cond_var),
                };
                let mean = match self.mean_fn.eval_var(x, j) {
                    Some(m) => mean + m,
                    None => mean,
                };
                (mean, var)
            })
            .collect()
    }

    /// Draws `u_r = μ + L_q ε_r` for every row and returns
    /// `L_zz⁻¹ (u_r − m_z)` per output. `eps[j]` is `M×R` standard normal.
    pub fn sample_inducing(&self, eps: &[Array]) -> Vec<Var<'t>> {
        self.outputs
            .iter()
            .zip(eps)
            .map(|(o, e)| {
                let r = e.cols();
                let ones = self.tape.constant(Array::filled(&[1, r], 1.0));
                o.alpha.matmul(ones) + o.proj.matmul(self.tape.constant(e.clone()))
            })
            .collect()
    }

    /// `Σ_j KL(q(u_j) ‖ p(u_j))`.
    pub fn kl(&self) -> Var<'t> {
        let m = self.num_inducing as f64;
        let mut total = self.tape.scalar(0.0);
        for o in &self.outputs {
            let trace = o.proj.square().sum();
            let maha = o.alpha.square().sum();
            let logdet_q = o.q_log_diag.sum() * 2.0;
            total = total + (trace + maha - m - logdet_q) * 0.5;
        }
        total
    }
}
