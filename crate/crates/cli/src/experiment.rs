use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpssm_core::data::{ColumnSpec, Dataset, NormStats, Trajectory};
use gpssm_core::inference::{evaluate_trajectories, init_model, train, Algorithm, ElboValues, TrainConfig};
use gpssm_core::rng;
use gpssm_core::ssm::{Dims, SamplingStrategy, SsmModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AlgorithmVariant, ExperimentConfig};
use crate::error::CliError;

/// One line of `results.jsonl`. Everything in it is a function of the
/// configuration and seed, so reruns reproduce it byte for byte; wall-clock
/// times live in the `timings.jsonl` sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub dataset: String,
    /// Table label such as `PR-SSM` or `CBF-SSM-50`.
    pub algorithm: String,
    pub k_soft: f64,
    pub beta: f64,
    pub seed: u64,
    pub seqlen: usize,
    pub iterations: usize,
    /// Test RMSE on the normalized scale.
    pub rmse: f64,
    /// Test RMSE in the units of the data.
    pub rmse_raw: f64,
    /// Mean per-step predictive log-likelihood (normalized scale).
    pub log_likelihood: f64,
    pub final_elbo: f64,
    /// ELBO trace, relative to the run directory.
    pub elbo_trace: String,
    /// Trained model, relative to the run directory.
    pub model_file: String,
}

/// Wall-clock cost of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub algorithm: String,
    pub seed: u64,
    pub seqlen: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// A trained model with what `predict` needs to read raw CSV data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub model: SsmModel,
    pub stats: NormStats,
    pub columns: ColumnSpec,
    pub strategy: SamplingStrategy,
    pub samples: usize,
}

impl ModelBundle {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Label used in records and tables: `CBF-SSM-<k>`, with an `S` suffix when
/// functions are drawn once per trajectory.
pub fn label(cfg: &TrainConfig) -> String {
    match cfg.algorithm {
        Algorithm::CbfSsm => {
            let suffix = if cfg.strategy() == SamplingStrategy::SampledInducingPerTrajectory {
                "S"
            } else {
                ""
            };
            format!("CBF-SSM-{}{suffix}", cfg.k_soft)
        }
        a if cfg.strategy() != a.default_strategy() => format!("{a} ({:?})", cfg.strategy()),
        a => a.to_string(),
    }
}

/// Everything that distinguishes one training run within an experiment.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub label: String,
}

impl RunSpec {
    pub fn new(base: &TrainConfig, variant: &AlgorithmVariant, seqlen: usize, seed: u64) -> Self {
        let mut train = variant.apply(base);
        train.seq_len = seqlen;
        train.seed = seed;
        let label = label(&train);
        Self { train, label }
    }

    fn stem(&self) -> String {
        let safe: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        format!("{safe}_len{}_seed{}", self.train.seq_len, self.train.seed)
    }
}

/// Outcome of one run before anything is written.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: ResultRecord,
    pub timing: Timing,
    pub bundle: ModelBundle,
    pub history: Vec<ElboValues>,
}

/// A loaded experiment: configuration plus normalized data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub columns: ColumnSpec,
    pub dims: Dims,
}

impl Experiment {
    /// Loads the dataset; relative paths in the configuration are resolved
    /// against `base`.
    pub fn load(config: ExperimentConfig, base: &Path) -> Result<Self, CliError> {
        config.validate()?;
        let raw = config.dataset.load(base)?;
        let columns = config.dataset.columns(base, raw.d_u(), raw.d_y())?;
        let d_y = raw.d_y();
        let d_x = config.state_dim.unwrap_or(d_y + config.dataset.known_hidden());
        let dims = Dims::new(d_x, d_y, raw.d_u()).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            data: raw.normalize(),
            config,
            columns,
            dims,
        })
    }

    fn check_length(&self, seqlen: usize) -> Result<(), CliError> {
        let shortest = self.data.train.iter().map(Trajectory::len).min().unwrap_or(0);
        if seqlen > shortest {
            return Err(CliError::Data(format!(
                "sequence length {seqlen} exceeds the shortest training trajectory ({shortest} steps)"
            )));
        }
        Ok(())
    }

    fn test_set(&self) -> Result<Vec<Trajectory>, CliError> {
        let horizon = self.config.eval.horizon;
        self.data
            .test
            .iter()
            .map(|t| match horizon {
                Some(h) => Ok(t.slice(0..h.min(t.len()))?),
                None => Ok(t.clone()),
            })
            .collect()
    }

    /// Trains and evaluates one configuration.
    pub fn run(&self, spec: &RunSpec) -> Result<RunOutput, CliError> {
        self.check_length(spec.train.seq_len)?;
        let mut model_cfg = self.config.model.clone();
        model_cfg.lag = self.data.lag;
        let seed = spec.train.seed;
        let model = init_model(&self.data.train, self.dims, &model_cfg, seed)?;
        let start = Instant::now();
        let outcome = train(model, &self.data.train, &spec.train)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let test = self.test_set()?;
        let strategy = spec.train.strategy();
        let eval = evaluate_trajectories(
            &outcome.model,
            &test,
            &self.data.stats,
            self.config.eval.samples,
            strategy,
            rng::derive(seed, 0xE7A1),
        )?;
        let eval_seconds = start.elapsed().as_secs_f64();
        let stem = spec.stem();
        let record = ResultRecord {
            experiment: self.config.name.clone(),
            dataset: self.data.name.clone(),
            algorithm: spec.label.clone(),
            k_soft: spec.train.k_soft,
            beta: spec.train.beta,
            seed,
            seqlen: spec.train.seq_len,
            iterations: spec.train.iterations,
            rmse: eval.rmse,
            rmse_raw: eval.rmse_raw,
            log_likelihood: eval.log_likelihood,
            final_elbo: outcome.history.last().map_or(f64::NAN, |h| h.total),
            elbo_trace: format!("elbo/{stem}.csv"),
            model_file: format!("models/{stem}.json"),
        };
        let timing = Timing {
            algorithm: spec.label.clone(),
            seed,
            seqlen: spec.train.seq_len,
            train_seconds,
            eval_seconds,
        };
        let bundle = ModelBundle {
            model: outcome.model,
            stats: self.data.stats.clone(),
            columns: self.columns.clone(),
            strategy,
            samples: self.config.eval.samples,
        };
        Ok(RunOutput {
            record,
            timing,
            bundle,
            history: outcome.history,
        })
    }

    /// Runs every spec, side by side on `config.threads` workers. Results
    /// come back in the order of `specs`.
    pub fn run_all(&self, specs: &[RunSpec]) -> Result<Vec<RunOutput>, CliError> {
        for s in specs {
            self.check_length(s.train.seq_len)?;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.threads)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| specs.par_iter().map(|s| self.run(s)).collect())
    }

    /// Specs for `train`: the training algorithm at `train.seq_len`, once per seed.
    pub fn train_specs(&self) -> Vec<RunSpec> {
        let variant = AlgorithmVariant::plain(self.config.train.algorithm);
        let base = &self.config.train;
        self.config
            .seeds
            .iter()
            .map(|&seed| RunSpec::new(base, &variant, base.seq_len, seed))
            .collect()
    }

    /// Specs for `benchmark`: every variant at `train.seq_len`, once per seed.
    pub fn benchmark_specs(&self) -> Vec<RunSpec> {
        let base = &self.config.train;
        self.config
            .variants()
            .iter()
            .flat_map(|v| self.config.seeds.iter().map(move |&s| RunSpec::new(base, v, base.seq_len, s)))
            .collect()
    }

    /// Specs for `seqlen-sweep`: every variant at every length, once per seed.
    pub fn sweep_specs(&self) -> Vec<RunSpec> {
        let base = &self.config.train;
        let mut out = Vec::new();
        for v in self.config.variants() {
            for &len in &self.config.lengths {
                for &seed in &self.config.seeds {
                    out.push(RunSpec::new(base, &v, len, seed));
                }
            }
        }
        out
    }
}

/// A timestamped run directory `<base>/<name>/<timestamp>/`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(base: &Path, name: &str) -> Result<Self, CliError> {
        let parent = base.join(name);
        fs::create_dir_all(&parent)?;
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S").to_string();
        for attempt in 0.. {
            let dir = if attempt == 0 {
                parent.join(&stamp)
            } else {
                parent.join(format!("{stamp}-{attempt}"))
            };
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(Self { path: dir }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("the attempt counter is unbounded")
    }

    pub fn write_config(&self, config: &ExperimentConfig) -> Result<(), CliError> {
        let text = toml::to_string(config).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(self.path.join("config.toml"), text)?;
        Ok(())
    }

    fn append_line<T: Serialize>(&self, file: &str, value: &T) -> Result<(), CliError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path.join(file))?;
        writeln!(f, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }

    /// Persists one run: record, timing, ELBO trace and model.
    pub fn save(&self, run: &RunOutput) -> Result<(), CliError> {
        let trace = self.path.join(&run.record.elbo_trace);
        let model = self.path.join(&run.record.model_file);
        for p in [&trace, &model] {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut w = csv::Writer::from_path(&trace)?;
        w.write_record([
            "iteration",
            "total",
            "likelihood",
            "forward_kl",
            "backward_kl",
            "recognition_kl",
            "conditioning_kl",
        ])?;
        for (i, h) in run.history.iter().enumerate() {
            w.write_record(
                std::iter::once(i.to_string()).chain(
                    [
                        h.total,
                        h.likelihood,
                        h.forward_kl,
                        h.backward_kl,
                        h.recognition_kl,
                        h.conditioning_kl,
                    ]
                    .iter()
                    .map(f64::to_string),
                ),
            )?;
        }
        w.flush()?;
        fs::write(&model, serde_json::to_string(&run.bundle)?)?;
        self.append_line("results.jsonl", &run.record)?;
        self.append_line("timings.jsonl", &run.timing)?;
        Ok(())
    }
}

/// Reads the records of a `results.jsonl` file.
pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Sample mean and sample standard deviation (`n − 1` denominator; 0 for a
/// single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// One row of the sequence-length CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub algorithm: String,
    pub seqlen: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub runs: usize,
}

/// Groups records by (algorithm, seqlen) in order of first appearance.
pub fn sweep_rows(records: &[ResultRecord]) -> Vec<SweepRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in records {
        let key = (r.algorithm.clone(), r.seqlen);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(algorithm, seqlen)| {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.algorithm == algorithm && r.seqlen == seqlen)
                .map(|r| r.rmse)
                .collect();
            let (rmse_mean, rmse_std) = mean_std(&values);
            SweepRow {
                algorithm,
                seqlen,
                rmse_mean,
                rmse_std,
                runs: values.len(),
            }
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
