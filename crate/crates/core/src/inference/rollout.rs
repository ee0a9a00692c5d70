use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::gp::{InducingMode, PreparedGp};
use crate::rng;
use crate::ssm::step::{self, DiagVar};
use crate::ssm::{Dims, ModelVars, SamplingStrategy, SsmModel};
use crate::tensor::{Array, Tape, Var};

/// Approximate posterior family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// No conditioning on measurements.
    PrSsm,
    /// Conditioning of the observed components on `y_{t+1}`.
    Vcdt,
    /// Conditioning on backward-pass pseudo-states `x̃_{t+1}`.
    CbfSsm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::PrSsm, Algorithm::Vcdt, Algorithm::CbfSsm];

    pub fn default_strategy(self) -> SamplingStrategy {
        match self {
            Algorithm::PrSsm | Algorithm::CbfSsm => SamplingStrategy::IndependentPerStep,
            Algorithm::Vcdt => SamplingStrategy::SampledInducingPerTrajectory,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PrSsm => "PR-SSM",
            Algorithm::Vcdt => "VCDT",
            Algorithm::CbfSsm => "CBF-SSM",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "prssm" => Ok(Algorithm::PrSsm),
            "vcdt" => Ok(Algorithm::Vcdt),
            "cbfssm" | "cbf" => Ok(Algorithm::CbfSsm),
            _ => Err(Error::InvalidArgument(format!("unknown algorithm '{s}'"))),
        }
    }
}

/// Everything that shapes one rollout apart from the model and the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSpec {
    pub algorithm: Algorithm,
    pub strategy: SamplingStrategy,
    /// Soft factor for conditioning on pseudo-states.
    pub k_soft: f64,
    /// Soft factor for conditioning on raw measurements.
    pub k_vcdt: f64,
    /// Samples per window.
    pub samples: usize,
}

impl RolloutSpec {
    pub fn new(algorithm: Algorithm, samples: usize) -> Self {
        Self {
            algorithm,
            strategy: algorithm.default_strategy(),
            k_soft: 50.0,
            k_vcdt: 1.0,
            samples,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        if !(self.k_soft >= 1.0) || !(self.k_vcdt >= 1.0) {
            return Err(Error::InvalidArgument("soft factors must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Pre-drawn standard-normal noise for a rollout over `R` rows.
///
/// The forward and backward draws come from separate streams, so two
/// algorithms sharing a seed see identical forward noise.
#[derive(Clone, Debug)]
pub struct RolloutNoise {
    pub init: Array,
    pub steps: Vec<Array>,
    /// One `M×R` block per forward GP output.
    pub inducing: Vec<Array>,
    pub backward_init: Array,
    pub backward_steps: Vec<Array>,
    pub backward_inducing: Vec<Array>,
}

const FORWARD_STREAM: u64 = 0xF0;
const BACKWARD_STREAM: u64 = 0xB0;

impl RolloutNoise {
    pub fn draw(model: &SsmModel, rows: usize, len: usize, seed: u64) -> Self {
        let Dims { x: dx, .. } = model.dims;
        let dh = model.dims.hidden();
        let mut f = rng::stream(seed, FORWARD_STREAM);
        let init = rng::normal_array(&mut f, rows, dx);
        let steps = (1..len).map(|_| rng::normal_array(&mut f, rows, dx)).collect();
        let m = model.forward.num_inducing();
        let inducing = (0..dx).map(|_| rng::normal_array(&mut f, m, rows)).collect();
        let mut b = rng::stream(seed, BACKWARD_STREAM);
        let backward_init = rng::normal_array(&mut b, rows, dh);
        let backward_steps = (1..len).map(|_| rng::normal_array(&mut b, rows, dh)).collect();
        let mb = model.backward.num_inducing();
        let backward_inducing = (0..dh).map(|_| rng::normal_array(&mut b, mb, rows)).collect();
        Self {
            init,
            steps,
            inducing,
            backward_init,
            backward_steps,
            backward_inducing,
        }
    }
}

/// A recorded posterior rollout. Row `w·S + s` is sample `s` of window `w`.
pub struct Rollout<'t> {
    pub spec: RolloutSpec,
    pub windows: usize,
    /// Sampled states per step, `R×d_x`.
    pub states: Vec<Var<'t>>,
    /// Distribution each state was sampled from (after conditioning).
    pub filtered: Vec<DiagVar<'t>>,
    /// Backward pseudo-states and their conditioning variance (CBF-SSM only).
    pub pseudo: Vec<DiagVar<'t>>,
    /// `Σ_t E_q[log p(y_t | x_t)]`, averaged over samples, summed over windows.
    pub likelihood: Var<'t>,
    pub conditioning_kl: Var<'t>,
    pub recognition_kl: Var<'t>,
    pub forward_kl: Var<'t>,
    pub backward_kl: Var<'t>,
}

fn mode_for<'t>(
    strategy: SamplingStrategy,
    gp: &PreparedGp<'t>,
    eps: &[Array],
) -> InducingMode<'t> {
    match strategy {
        SamplingStrategy::IndependentPerStep => InducingMode::Marginal,
        SamplingStrategy::MeanInducing => InducingMode::Mean,
        SamplingStrategy::SampledInducingPerTrajectory => {
            InducingMode::Sampled(gp.sample_inducing(eps))
        }
    }
}

/// Row-replicated constants for step `t` of every window.
fn replicate<'t>(tape: &'t Tape, windows: &[Window], samples: usize, t: usize, y: bool) -> Var<'t> {
    let src = |w: &Window| if y { w.y.row(t).to_vec() } else { w.u.row(t).to_vec() };
    let cols = if y { windows[0].y.cols() } else { windows[0].u.cols() };
    let mut data = Vec::with_capacity(windows.len() * samples * cols);
    for w in windows {
        let r = src(w);
        for _ in 0..samples {
            data.extend_from_slice(&r);
        }
    }
    tape.constant(Array::matrix(windows.len() * samples, cols, data))
}

fn check_windows(model: &SsmModel, windows: &[Window]) -> Result<usize> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let len = first.y.rows();
    if len < 2 {
        return Err(Error::InvalidArgument("windows need at least two steps".into()));
    }
    if len < model.recognition.lag {
        return Err(Error::InvalidArgument(format!(
            "windows of length {len} shorter than the recognition lag {}",
            model.recognition.lag
        )));
    }
    for w in windows {
        if w.y.rows() != len || w.u.rows() != len {
            return Err(Error::Shape("windows in a batch must share one length".into()));
        }
        if w.y.cols() != model.dims.y || w.u.cols() != model.dims.u {
            return Err(Error::Shape(format!(
                "window with d_y={}, d_u={} for a model with d_y={}, d_u={}",
                w.y.cols(),
                w.u.cols(),
                model.dims.y,
                model.dims.u
            )));
        }
    }
    Ok(len)
}

/// Backward pass: pseudo-states `x̃_{1:T}` whose observed components equal
/// `y_t` and whose hidden components are sampled from the backward GP.
/// Each entry carries the sample as mean and the conditioning variance
/// (`Σ̃_x`, plus the backward predictive variance on hidden components).
pub fn backward_pass<'t>(
    vars: &ModelVars<'t>,
    spec: &RolloutSpec,
    windows: &[Window],
    noise: &RolloutNoise,
) -> (Vec<DiagVar<'t>>, Var<'t>) {
    let tape = vars.log_process_noise.tape();
    let dims = vars.dims;
    let (dy, dh) = (dims.y, dims.hidden());
    let len = windows[0].y.rows();
    let s = spec.samples;
    let rows = windows.len() * s;
    let pseudo_row = step::broadcast_row(vars.log_pseudo_noise.exp(), rows);
    let ys: Vec<Var<'t>> = (0..len).map(|t| replicate(tape, windows, s, t, true)).collect();

    if dh == 0 {
        let out = ys.into_iter().map(|y| DiagVar { mean: y, var: pseudo_row }).collect();
        return (out, tape.scalar(0.0));
    }

    let gp = vars.backward.prepare();
    let mode = mode_for(spec.strategy, &gp, &noise.backward_inducing);
    let init = step::affine_gaussian(vars.binit_weight, vars.binit_bias, ys[len - 1]);
    let mut hidden = init.sample(&noise.backward_init);
    let mut hidden_var = init.var;
    let mut out = vec![None; len];
    let assemble = |y: Var<'t>, h: Var<'t>, hv: Var<'t>| {
        let floor_obs = pseudo_row.cols_range(0..dy);
        let floor_hidden = pseudo_row.cols_range(dy..dims.x);
        DiagVar {
            mean: tape.concat_cols(&[y, h]),
            var: tape.concat_cols(&[floor_obs, hv + floor_hidden]),
        }
    };
    out[len - 1] = Some(assemble(ys[len - 1], hidden, hidden_var));
    for t in (0..len - 1).rev() {
        let x_next = tape.concat_cols(&[ys[t + 1], hidden]);
        let input = if dims.u > 0 {
            tape.concat_cols(&[x_next, replicate(tape, windows, s, t, false)])
        } else {
            x_next
        };
        let preds = gp.predict(input, &mode);
        let mean = tape.concat_cols(&preds.iter().map(|p| p.0).collect::<Vec<_>>());
        let var = tape.concat_cols(&preds.iter().map(|p| p.1).collect::<Vec<_>>());
        let dist = DiagVar { mean, var };
        hidden = dist.sample(&noise.backward_steps[t]);
        hidden_var = var;
        out[t] = Some(assemble(ys[t], hidden, hidden_var));
    }
    (out.into_iter().map(Option::unwrap).collect(), gp.kl())
}

/// Forward rollout of the approximate posterior over a batch of windows.
pub fn rollout<'t>(
    model: &SsmModel,
    vars: &ModelVars<'t>,
    spec: &RolloutSpec,
    windows: &[Window],
    noise: &RolloutNoise,
) -> Result<Rollout<'t>> {
    spec.validate()?;
    let len = check_windows(model, windows)?;
    let tape = vars.log_process_noise.tape();
    let dims = vars.dims;
    let (dx, dy) = (dims.x, dims.y);
    let s = spec.samples;
    let rows = windows.len() * s;
    if noise.init.rows() != rows || noise.steps.len() + 1 < len {
        return Err(Error::Shape("noise bank does not match the batch".into()));
    }
    let per_sample = 1.0 / s as f64;

    let (pseudo, backward_kl) = match spec.algorithm {
        Algorithm::CbfSsm => backward_pass(vars, spec, windows, noise),
        _ => (Vec::new(), tape.scalar(0.0)),
    };

    let gp = vars.forward.prepare();
    let mode = mode_for(spec.strategy, &gp, &noise.inducing);
    let process_var = vars.log_process_noise.exp();
    let pseudo_var_obs =
        step::broadcast_row(vars.log_pseudo_noise.exp(), rows).cols_range(0..dy);

    // recognition on the first `lag` steps of each window
    let lag = vars.lag;
    let mut feats = Vec::with_capacity(rows * lag * (dy + dims.u));
    for w in windows {
        let f = crate::ssm::RecognitionModule::features(lag, &w.y, &w.u)?;
        for _ in 0..s {
            feats.extend_from_slice(&f);
        }
    }
    let feats = tape.constant(Array::matrix(rows, feats.len() / rows, feats));
    let q1 = step::affine_gaussian(vars.rec_weight, vars.rec_bias, feats);
    let p1 = step::isotropic(tape, rows, dx, vars.init_prior_var);
    let recognition_kl = step::diag_kl(q1, p1) * per_sample;

    let ys: Vec<Var<'t>> = (0..len).map(|t| replicate(tape, windows, s, t, true)).collect();
    let mut x = q1.sample(&noise.init);
    let mut states = vec![x];
    let mut filtered = vec![q1];
    let mut likelihood = step::expected_log_lik(q1.cols(0..dy), ys[0], vars.log_obs_noise);
    let mut conditioning_kl = tape.scalar(0.0);

    for t in 0..len - 1 {
        let u = (dims.u > 0).then(|| replicate(tape, windows, s, t, false));
        let prior = step::transition(&gp, x, u, &mode, process_var);
        let post = match spec.algorithm {
            Algorithm::PrSsm => prior,
            Algorithm::Vcdt => {
                let obs = step::soft_condition(
                    prior.cols(0..dy),
                    ys[t + 1],
                    pseudo_var_obs,
                    spec.k_vcdt,
                );
                if dy == dx {
                    obs
                } else {
                    let hidden = prior.cols(dy..dx);
                    DiagVar {
                        mean: tape.concat_cols(&[obs.mean, hidden.mean]),
                        var: tape.concat_cols(&[obs.var, hidden.var]),
                    }
                }
            }
            Algorithm::CbfSsm => {
                let target = pseudo[t + 1];
                step::soft_condition(prior, target.mean, target.var, spec.k_soft)
            }
        };
        if spec.algorithm != Algorithm::PrSsm {
            conditioning_kl = conditioning_kl + step::diag_kl(post, prior);
        }
        x = post.sample(&noise.steps[t]);
        likelihood =
            likelihood + step::expected_log_lik(post.cols(0..dy), ys[t + 1], vars.log_obs_noise);
        states.push(x);
        filtered.push(post);
    }

    Ok(Rollout {
        spec: *spec,
        windows: windows.len(),
        states,
        filtered,
        pseudo,
        likelihood: likelihood * per_sample,
        conditioning_kl: conditioning_kl * per_sample,
        recognition_kl,
        forward_kl: gp.kl(),
        backward_kl,
    })
}

/// How the inducing KL is spread over a minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlScale {
    /// Total number of training time steps.
    pub t_full: usize,
    /// Window length.
    pub t_sub: usize,
    /// Windows per batch.
    pub batch: usize,
}

impl KlScale {
    /// Weight of the inducing KLs for this batch: the batch's share of the
    /// data, times the window length when functions are drawn independently
    /// at every step.
    pub fn inducing_weight(&self, strategy: SamplingStrategy) -> f64 {
        let coverage = (self.batch * self.t_sub) as f64 / self.t_full.max(1) as f64;
        let per_step = match strategy {
            SamplingStrategy::IndependentPerStep => self.t_sub as f64,
            _ => 1.0,
        };
        coverage * per_step
    }
}

/// ELBO pieces on the tape.
pub struct ElboTerms<'t> {
    pub likelihood: Var<'t>,
    pub forward_kl: Var<'t>,
    pub backward_kl: Var<'t>,
    pub recognition_kl: Var<'t>,
    pub conditioning_kl: Var<'t>,
    pub beta: f64,
    pub inducing_weight: f64,
    pub total: Var<'t>,
}

/// Plain values of [`ElboTerms`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboValues {
    pub likelihood: f64,
    pub forward_kl: f64,
    pub backward_kl: f64,
    pub recognition_kl: f64,
    pub conditioning_kl: f64,
    pub beta: f64,
    pub inducing_weight: f64,
    pub total: f64,
}

impl<'t> ElboTerms<'t> {
    pub fn values(&self) -> ElboValues {
        ElboValues {
            likelihood: self.likelihood.item(),
            forward_kl: self.forward_kl.item(),
            backward_kl: self.backward_kl.item(),
            recognition_kl: self.recognition_kl.item(),
            conditioning_kl: self.conditioning_kl.item(),
            beta: self.beta,
            inducing_weight: self.inducing_weight,
            total: self.total.item(),
        }
    }
}

/// `likelihood − β·[w_u·(KL_f + KL_b) + KL_rec + Σ KL_cond]`.
pub fn elbo<'t>(rollout: &Rollout<'t>, scale: &KlScale, beta: f64) -> ElboTerms<'t> {
    let w = scale.inducing_weight(rollout.spec.strategy);
    let kl = (rollout.forward_kl + rollout.backward_kl) * w
        + rollout.recognition_kl
        + rollout.conditioning_kl;
    ElboTerms {
        likelihood: rollout.likelihood,
        forward_kl: rollout.forward_kl,
        backward_kl: rollout.backward_kl,
        recognition_kl: rollout.recognition_kl,
        conditioning_kl: rollout.conditioning_kl,
        beta,
        inducing_weight: w,
        total: rollout.likelihood - kl * beta,
    }
}
