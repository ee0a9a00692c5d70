use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::rollout::{elbo, rollout, Algorithm, ElboValues, KlScale, RolloutNoise, RolloutSpec};
use crate::data::{subsequences, Trajectory};
use crate::error::{Error, Result};
use crate::rng;
use crate::ssm::{Dims, ModelConfig, SamplingStrategy, SsmModel};
use crate::tensor::{Array, Tape};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Defaults to the algorithm's own strategy.
    pub strategy: Option<SamplingStrategy>,
    pub k_soft: f64,
    pub k_vcdt: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Samples per window.
    pub samples: usize,
    /// Window length `T_sub`.
    pub seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::CbfSsm,
            strategy: None,
            k_soft: 50.0,
            k_vcdt: 1.0,
            beta: 1.0,
            learning_rate: 1e-3,
            iterations: 1000,
            samples: 8,
            seq_len: 50,
            batch_size: 4,
            seed: 0,
            clip_norm: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy.unwrap_or(self.algorithm.default_strategy())
    }

    pub fn rollout_spec(&self) -> RolloutSpec {
        RolloutSpec {
            algorithm: self.algorithm,
            strategy: self.strategy(),
            k_soft: self.k_soft,
            k_vcdt: self.k_vcdt,
            samples: self.samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be positive")));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate");
        }
        if !(self.beta > 0.0) {
            return bad("beta");
        }
        if self.samples == 0 {
            return bad("samples");
        }
        if self.batch_size == 0 {
            return bad("batch size");
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument("sequence length must be at least 2".into()));
        }
        if !(self.k_soft >= 1.0) || !(self.k_vcdt >= 1.0) {
            return Err(Error::InvalidArgument("soft factors must be ≥ 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array>,
    v: Vec<Array>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&Array]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|a| Array::zeros(a.shape())).collect(),
            v: shapes.iter().map(|a| Array::zeros(a.shape())).collect(),
            t: 0,
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: Vec<&mut Array>, grads: &[Array]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Initial model for normalized trajectories: inducing inputs are a uniform
/// subsample of training steps, with observed state components taken from
/// `y` and hidden ones drawn from a standard normal.
pub fn init_model(trajs: &[Trajectory], dims: Dims, config: &ModelConfig, seed: u64) -> Result<SsmModel> {
    let steps: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    if steps.is_empty() {
        return Err(Error::Data("no training steps".into()));
    }
    let m = config.num_inducing.max(1);
    let mut r = rng::stream(seed, 0x1D);
    let picks: Vec<usize> = if m <= steps.len() {
        sample_indices(&mut r, steps.len(), m).into_vec()
    } else {
        (0..m).map(|i| i % steps.len()).collect()
    };
    let mut z = Vec::with_capacity(m * dims.gp_input());
    for p in picks {
        let (k, i) = steps[p];
        let t = &trajs[k];
        for j in 0..dims.y {
            // small spread keeps repeated or constant rows apart
            z.push(t.y.at(i, j) + 1e-3 * rng::normal(&mut r));
        }
        for _ in dims.y..dims.x {
            z.push(rng::normal(&mut r));
        }
        for j in 0..dims.u {
            z.push(t.u.at(i, j) + 1e-3 * rng::normal(&mut r));
        }
    }
    SsmModel::new(dims, config, Array::matrix(m, dims.gp_input(), z))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SsmModel,
    /// ELBO terms of every iteration, in order.
    pub history: Vec<ElboValues>,
    /// Number of skipped non-finite steps.
    pub skipped: usize,
}

fn describe_nonfinite(v: &ElboValues) -> String {
    let terms = [
        ("likelihood", v.likelihood),
        ("forward inducing KL", v.forward_kl),
        ("backward inducing KL", v.backward_kl),
        ("recognition KL", v.recognition_kl),
        ("conditioning KL", v.conditioning_kl),
    ];
    let bad: Vec<&str> = terms.iter().filter(|t| !t.1.is_finite()).map(|t| t.0).collect();
    if bad.is_empty() {
        "gradient".into()
    } else {
        bad.join(", ")
    }
}

/// Stochastic-gradient ELBO maximization over random windows.
///
/// Every iteration draws `batch_size` windows and fresh rollout noise from
/// streams derived from `config.seed`, so the whole run is reproducible.
/// Model `k_soft` and `beta` are set from the config.
pub fn train(model: SsmModel, trajs: &[Trajectory], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            skipped: 0,
        });
    }
    let mut model = model;
    model.k_soft = config.k_soft;
    model.beta = config.beta;
    let mut sampler = subsequences(trajs, config.seq_len, rng::derive(config.seed, 0x5B))?;
    let spec = config.rollout_spec();
    let scale = KlScale {
        t_full: trajs.iter().map(Trajectory::len).sum(),
        t_sub: config.seq_len,
        batch: config.batch_size,
    };
    let norm = 1.0 / (config.batch_size * config.seq_len) as f64;
    let mut adam = Adam::new(config.learning_rate, &model.params());
    let mut skipped = 0;
    for it in 0..config.iterations {
        let windows = sampler.next_batch(config.batch_size);
        let rows = config.batch_size * config.samples;
        let noise_seed = rng::derive(config.seed, 0x10_0000 + it as u64);
        let noise = RolloutNoise::draw(&model, rows, config.seq_len, noise_seed);
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let ids = vars.leaf_ids();
        let step = rollout(&model, &vars, &spec, &windows, &noise)
            .map(|r| elbo(&r, &scale, config.beta));
        let terms = step?;
        let values = terms.values();
        let grads = tape.gradient(terms.total * -norm, &ids).map(|g| {
            ids.iter()
                .map(|id| g.get(*id).cloned().expect("every leaf has a gradient"))
                .collect::<Vec<_>>()
        });
        let grads = grads.ok().filter(|g| g.iter().all(Array::is_finite));
        match grads {
            Some(mut grads) if values.total.is_finite() => {
                let norm2: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
                let gnorm = norm2.sqrt();
                if gnorm > config.clip_norm {
                    let s = config.clip_norm / gnorm;
                    for g in &mut grads {
                        g.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
                adam.step(model.params_mut(), &grads);
                history.push(values);
            }
            _ => {
                if skipped > 0 {
                    return Err(Error::NonFinite(format!(
                        "iteration {it}: non-finite {} after halving the learning rate",
                        describe_nonfinite(&values)
                    )));
                }
                skipped += 1;
                adam.lr *= 0.5;
                history.push(values);
            }
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        skipped,
    })
}
