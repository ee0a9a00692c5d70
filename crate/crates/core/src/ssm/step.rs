//! Tape versions of the state-space primitives, vectorized over rows.
//!
//! Every state distribution is a pair of `R×d` matrices (mean, variance):
//! one row per rollout sample, one column per component, diagonal
//! covariance within a row.

use crate::gp::{InducingMode, PreparedGp};
use crate::tensor::{Array, Tape, Var};

/// Row-wise diagonal Gaussians.
#[derive(Clone, Copy, Debug)]
pub struct DiagVar<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

impl<'t> DiagVar<'t> {
    pub fn cols(&self, range: std::ops::Range<usize>) -> DiagVar<'t> {
        DiagVar {
            mean: self.mean.cols_range(range.clone()),
            var: self.var.cols_range(range),
        }
    }

    /// Reparametrized sample `mean + sqrt(var) ∘ eps`.
    pub fn sample(&self, eps: &Array) -> Var<'t> {
        let tape = self.mean.tape();
        self.mean + self.var.sqrt() * tape.constant(eps.clone())
    }
}

/// Repeats a `d`-vector into an `R×d` matrix.
pub fn broadcast_row<'t>(v: Var<'t>, rows: usize) -> Var<'t> {
    let tape = v.tape();
    tape.constant(Array::filled(&[rows, 1], 1.0)).matmul(v.t())
}

/// `p(x_{t+1} | x_t, u_t)` with `f` handled according to `mode`.
pub fn transition<'t>(
    gp: &PreparedGp<'t>,
    x: Var<'t>,
    u: Option<Var<'t>>,
    mode: &InducingMode<'t>,
    process_var: Var<'t>,
) -> DiagVar<'t> {
    let tape = x.tape();
    let input = match u {
        Some(u) if u.cols() > 0 => tape.concat_cols(&[x, u]),
        _ => x,
    };
    let preds = gp.predict(input, mode);
    let means: Vec<Var<'t>> = preds.iter().map(|p| p.0).collect();
    let vars: Vec<Var<'t>> = preds.iter().map(|p| p.1).collect();
    DiagVar {
        mean: tape.concat_cols(&means),
        var: tape.concat_cols(&vars) + broadcast_row(process_var, x.rows()),
    }
}

/// Component-wise soft Kalman update of `prior` towards `target`.
///
/// The gain is `Σ⁻ / (Σ̃ + kΣ⁻)` and the variance uses the Joseph form
/// `(1−K)²Σ⁻ + K²Σ̃`.
pub fn soft_condition<'t>(
    prior: DiagVar<'t>,
    target: Var<'t>,
    target_var: Var<'t>,
    k: f64,
) -> DiagVar<'t> {
    let gain = prior.var / (target_var + prior.var * k);
    let keep = 1.0 - gain;
    DiagVar {
        mean: prior.mean + gain * (target - prior.mean),
        var: keep.square() * prior.var + gain.square() * target_var,
    }
}

/// `Σ KL(q ‖ p)` over every entry of two row-wise diagonal Gaussians.
pub fn diag_kl<'t>(q: DiagVar<'t>, p: DiagVar<'t>) -> Var<'t> {
    let ratio = q.var / p.var;
    let maha = (q.mean - p.mean).square() / p.var;
    ((ratio + maha - ratio.ln() - 1.0) * 0.5).sum()
}

/// `Σ E_{N(x; mean, var)}[log N(y; x, σ²)]` over all entries, with `state`
/// restricted to the observed components.
pub fn expected_log_lik<'t>(state: DiagVar<'t>, y: Var<'t>, log_obs_var: Var<'t>) -> Var<'t> {
    let rows = y.rows();
    let log_s = broadcast_row(log_obs_var, rows);
    let s = log_s.exp();
    let quad = ((y - state.mean).square() + state.var) / s;
    let n = (rows * y.cols()) as f64;
    (log_s + quad).sum() * -0.5 - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Affine Gaussian head: `[mean, log var] = features · Wᵀ + b`.
pub fn affine_gaussian<'t>(weight: Var<'t>, bias: Var<'t>, features: Var<'t>) -> DiagVar<'t> {
    let d = bias.rows() / 2;
    let out = features.matmul(weight.t()) + broadcast_row(bias, features.rows());
    DiagVar {
        mean: out.cols_range(0..d),
        var: out.cols_range(d..2 * d).exp(),
    }
}

/// Constant broad prior `N(0, v·I)` shaped like `like`.
pub fn isotropic<'t>(tape: &'t Tape, rows: usize, cols: usize, variance: f64) -> DiagVar<'t> {
    DiagVar {
        mean: tape.constant(Array::zeros(&[rows, cols])),
        var: tape.constant(Array::filled(&[rows, cols], variance)),
    }
}
