use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Trajectory};
use crate::error::{Error, Result};
use crate::gp::InducingMode;
use crate::rng;
use crate::ssm::step;
use crate::ssm::{RecognitionModule, SamplingStrategy, SsmModel};
use crate::tensor::{Array, Tape};

/// Per-step predictive Gaussians over observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Index of the first predicted step.
    pub start: usize,
    /// `H×d_y`
    pub mean: Array,
    /// `H×d_y`
    pub var: Array,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn denormalize(&self, stats: &NormStats) -> Prediction {
        Prediction {
            start: self.start,
            mean: stats.denormalize_y_mean(&self.mean),
            var: stats.denormalize_y_var(&self.var),
        }
    }
}

/// Open-loop prediction from the recognized initial state: `S` sample
/// trajectories are rolled forward without any conditioning and moment
/// matched per step. The returned steps are `lag..T`.
pub fn predict_open_loop(
    model: &SsmModel,
    y_init: &Array,
    u: &Array,
    samples: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<Prediction> {
    let lag = model.recognition.lag;
    let len = u.rows();
    if len <= lag {
        return Err(Error::InvalidArgument(format!(
            "{len} steps leave nothing to predict after the recognition lag {lag}"
        )));
    }
    if u.cols() != model.dims.u || y_init.cols() != model.dims.y {
        return Err(Error::Shape(format!(
            "inputs with d_y={}, d_u={} for a model with d_y={}, d_u={}",
            y_init.cols(),
            u.cols(),
            model.dims.y,
            model.dims.u
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let (dx, dy) = (model.dims.x, model.dims.y);
    let features = RecognitionModule::features(lag, y_init, u)?;
    let mut f = rng::stream(seed, 0x9E);

    let m = model.forward.num_inducing();
    let eps: Vec<Array> = match strategy {
        SamplingStrategy::SampledInducingPerTrajectory => {
            (0..dx).map(|_| rng::normal_array(&mut f, m, samples)).collect()
        }
        _ => Vec::new(),
    };
    let rec = model.recognition.map.apply(&features)?;
    let init_eps = rng::normal_array(&mut f, samples, dx);
    let mut x = Array::matrix(
        samples,
        dx,
        (0..samples * dx)
            .map(|i| rec.0[i % dx] + rec.1[i % dx].sqrt() * init_eps.data()[i])
            .collect(),
    );
    let obs_var = model.obs_noise();

    let h = len - lag;
    let mut mean = Vec::with_capacity(h * dy);
    let mut var = Vec::with_capacity(h * dy);
    for t in 0..len {
        if t >= lag {
            for j in 0..dy {
                let col: Vec<f64> = (0..samples).map(|r| x.at(r, j)).collect();
                let mu = col.iter().sum::<f64>() / samples as f64;
                let s2 = col.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / samples as f64;
                mean.push(mu);
                var.push(s2 + obs_var[j]);
            }
        }
        if t + 1 == len {
            break;
        }
        // a fresh tape per step keeps memory flat over long horizons
        let tape = Tape::unchecked();
        let vars = model.bind(&tape);
        let gp = vars.forward.prepare();
        let mode = match strategy {
            SamplingStrategy::IndependentPerStep => InducingMode::Marginal,
            SamplingStrategy::MeanInducing => InducingMode::Mean,
            SamplingStrategy::SampledInducingPerTrajectory => {
                InducingMode::Sampled(gp.sample_inducing(&eps))
            }
        };
        let u_t = tape.constant(Array::matrix(
            samples,
            u.cols(),
            u.row(t).iter().copied().cycle().take(samples * u.cols()).collect(),
        ));
        let prior = step::transition(
            &gp,
            tape.constant(x),
            Some(u_t),
            &mode,
            vars.log_process_noise.exp(),
        );
        x = prior.sample(&rng::normal_array(&mut f, samples, dx)).value();
        tape.status()?;
    }
    Ok(Prediction {
        start: lag,
        mean: Array::matrix(h, dy, mean),
        var: Array::matrix(h, dy, var),
    })
}

/// Accuracy of a prediction against the true observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Gaussian log density of the observations, averaged per step.
    pub log_likelihood: f64,
    pub steps: usize,
}

/// RMSE over every step and output, and the per-step average log-density.
pub fn evaluate(pred: &Prediction, y_true: &Array) -> Result<Metrics> {
    if pred.mean.rows() != y_true.rows() || pred.mean.cols() != y_true.cols() {
        return Err(Error::Shape(format!(
            "prediction {}×{} against targets {}×{}",
            pred.mean.rows(),
            pred.mean.cols(),
            y_true.rows(),
            y_true.cols()
        )));
    }
    let n = y_true.len();
    let steps = y_true.rows();
    if n == 0 {
        return Ok(Metrics {
            rmse: 0.0,
            log_likelihood: 0.0,
            steps: 0,
        });
    }
    let mut sq = 0.0;
    let mut ll = 0.0;
    for ((m, v), y) in pred.mean.data().iter().zip(pred.var.data()).zip(y_true.data()) {
        let d = y - m;
        sq += d * d;
        ll += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
    }
    Ok(Metrics {
        rmse: (sq / n as f64).sqrt(),
        log_likelihood: ll / steps as f64,
        steps,
    })
}

/// Pooled test metrics on normalized and raw scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rmse: f64,
    pub rmse_raw: f64,
    pub log_likelihood: f64,
}

fn pooled(parts: &[(Metrics, usize)]) -> (f64, f64) {
    let n: usize = parts.iter().map(|p| p.1).sum();
    let steps: usize = parts.iter().map(|p| p.0.steps).sum();
    let sq: f64 = parts.iter().map(|(m, k)| m.rmse * m.rmse * *k as f64).sum();
    let ll: f64 = parts.iter().map(|(m, _)| m.log_likelihood * m.steps as f64).sum();
    ((sq / n.max(1) as f64).sqrt(), ll / steps.max(1) as f64)
}

/// Open-loop evaluation on normalized test trajectories; raw-scale RMSE uses
/// `stats` to map predictions and targets back.
pub fn evaluate_trajectories(
    model: &SsmModel,
    trajs: &[Trajectory],
    stats: &NormStats,
    samples: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<EvalSummary> {
    let mut norm = Vec::new();
    let mut raw = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let pred = predict_open_loop(model, &t.y, &t.u, samples, strategy, seed.wrapping_add(i as u64))?;
        let c = t.y.cols();
        let target = Array::matrix(t.len() - pred.start, c, t.y.data()[pred.start * c..].to_vec());
        let n = target.len();
        norm.push((evaluate(&pred, &target)?, n));
        let raw_target = stats.denormalize_y_mean(&target);
        raw.push((evaluate(&pred.denormalize(stats), &raw_target)?, n));
    }
    let (rmse, log_likelihood) = pooled(&norm);
    let (rmse_raw, _) = pooled(&raw);
    Ok(EvalSummary {
        rmse,
        rmse_raw,
        log_likelihood,
    })
}
