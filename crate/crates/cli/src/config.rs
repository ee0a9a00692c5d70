use std::path::{Path, PathBuf};

use gpssm_core::data::{load_manifest, ColumnSpec, Manifest, simulate_dubins, simulate_linear, Dataset, DubinsParams, LinearSim, LinearSystem};
use gpssm_core::inference::{Algorithm, TrainConfig};
use gpssm_core::ssm::ModelConfig;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One experiment: a dataset, a model, an optimizer and the seeds to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Base directory; runs land in `<output_dir>/<name>/<timestamp>/`.
    pub output_dir: PathBuf,
    /// Training seeds, one result record each.
    pub seeds: Vec<u64>,
    /// Worker threads for running seeds side by side.
    pub threads: usize,
    /// Latent dimension `d_x`; defaults to `d_y` plus any known hidden states.
    pub state_dim: Option<usize>,
    /// Algorithms run by `benchmark` and `seqlen-sweep`; `train` uses
    /// `train.algorithm`.
    pub algorithms: Vec<AlgorithmVariant>,
    /// Window lengths for `seqlen-sweep`.
    pub lengths: Vec<usize>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: PathBuf::from("outputs"),
            seeds: vec![0],
            threads: 1,
            state_dim: None,
            algorithms: Vec::new(),
            lengths: vec![50, 150, 300],
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// An algorithm with optional per-variant overrides, as in the columns of a
/// benchmark table (`CBF-SSM-1`, `CBF-SSM-50`, `CBF-SSM-1S`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmVariant {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default)]
    pub strategy: Option<gpssm_core::ssm::SamplingStrategy>,
}

impl AlgorithmVariant {
    pub fn plain(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            k: None,
            strategy: None,
        }
    }

    /// The training settings for this variant on top of `base`.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.algorithm = self.algorithm;
        if let Some(k) = self.k {
            match self.algorithm {
                Algorithm::Vcdt => cfg.k_vcdt = k,
                _ => cfg.k_soft = k,
            }
        }
        if self.strategy.is_some() {
            cfg.strategy = self.strategy;
        }
        cfg
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sample trajectories per prediction.
    pub samples: usize,
    /// Steps per test trajectory to predict, counted from its start and
    /// including the recognition lag; `None` uses the whole trajectory.
    pub horizon: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            horizon: None,
        }
    }
}

/// Where the trajectories come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A CSV dataset described by a manifest file.
    Manifest { path: PathBuf },
    /// Simulated Dubin's car.
    Dubins {
        #[serde(default)]
        params: DubinsParams,
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_train_count")]
        train_trajectories: usize,
        #[serde(default = "default_test_count")]
        test_trajectories: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_lag")]
        lag: usize,
    },
    /// Simulated linear-Gaussian system; matrices are given row by row.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        #[serde(default = "default_x0_std")]
        x0_std: f64,
        #[serde(default = "default_control_std")]
        control_std: f64,
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_train_count")]
        train_trajectories: usize,
        #[serde(default = "default_test_count")]
        test_trajectories: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_lag")]
        lag: usize,
    },
}

fn default_length() -> usize {
    300
}

fn default_train_count() -> usize {
    4
}

fn default_test_count() -> usize {
    4
}

fn default_lag() -> usize {
    5
}

fn default_x0_std() -> f64 {
    1.0
}

fn default_control_std() -> f64 {
    1.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Dubins {
            params: DubinsParams::default(),
            length: default_length(),
            train_trajectories: default_train_count(),
            test_trajectories: default_test_count(),
            seed: 0,
            lag: default_lag(),
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("matrix {what} has ragged rows")));
    }
    Ok(DMatrix::from_row_iterator(n, m, rows.iter().flatten().copied()))
}

impl DatasetConfig {
    /// Builds the raw (unnormalized) dataset. Relative manifest paths are
    /// resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset, CliError> {
        match self {
            DatasetConfig::Manifest { path } => Ok(load_manifest(&base.join(path))?),
            DatasetConfig::Dubins {
                params,
                length,
                train_trajectories,
                test_trajectories,
                seed,
                lag,
            } => {
                let train = simulate_dubins(params, *length, *train_trajectories, *seed)?;
                let test = simulate_dubins(params, *length, *test_trajectories, seed.wrapping_add(1))?;
                Ok(Dataset::new("dubins", train, test, *lag)?)
            }
            DatasetConfig::Linear {
                a,
                b,
                c,
                q,
                r,
                x0_std,
                control_std,
                length,
                train_trajectories,
                test_trajectories,
                seed,
                lag,
            } => {
                let system = LinearSystem::new(
                    matrix(a, "a")?,
                    matrix(b, "b")?,
                    matrix(c, "c")?,
                    matrix(q, "q")?,
                    matrix(r, "r")?,
                )?;
                let sim = LinearSim {
                    system,
                    x0_std: *x0_std,
                    control_std: *control_std,
                };
                let train = simulate_linear(&sim, *length, *train_trajectories, *seed)?;
                let test = simulate_linear(&sim, *length, *test_trajectories, seed.wrapping_add(1))?;
                Ok(Dataset::new("linear", train, test, *lag)?)
            }
        }
    }

    /// CSV column names for the dataset's controls and outputs.
    pub fn columns(&self, base: &Path, d_u: usize, d_y: usize) -> Result<ColumnSpec, CliError> {
        let numbered = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect();
        match self {
            DatasetConfig::Manifest { path } => {
                let path = base.join(path);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                let manifest: Manifest =
                    toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                Ok(manifest.columns)
            }
            DatasetConfig::Dubins { params, .. } => {
                let mut y = vec!["px".to_string(), "py".to_string()];
                if params.observe_heading {
                    y.push("theta".into());
                }
                Ok(ColumnSpec {
                    u: vec!["v".into(), "kappa".into()],
                    y,
                    seq: Some("seq".into()),
                })
            }
            DatasetConfig::Linear { .. } => Ok(ColumnSpec {
                u: numbered("u", d_u),
                y: numbered("y", d_y),
                seq: Some("seq".into()),
            }),
        }
    }

    /// Number of state components that the data never shows.
    pub fn known_hidden(&self) -> usize {
        match self {
            DatasetConfig::Dubins { params, .. } if !params.observe_heading => 1,
            DatasetConfig::Linear { a, c, .. } => a.len().saturating_sub(c.len()),
            _ => 0,
        }
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub algorithm: Option<Algorithm>,
    pub k: Option<f64>,
    pub beta: Option<f64>,
    pub seqlen: Option<usize>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the environment (`GPSSM_OUT`, `GPSSM_THREADS`) and then the
    /// command-line flags, which take precedence.
    pub fn apply(&mut self, env: &[(String, String)], flags: &Overrides) -> Result<(), CliError> {
        for (key, value) in env {
            match key.as_str() {
                "GPSSM_OUT" => self.output_dir = PathBuf::from(value),
                "GPSSM_THREADS" => {
                    self.threads = value
                        .parse()
                        .map_err(|_| CliError::Config(format!("GPSSM_THREADS={value} is not a count")))?
                }
                _ => {}
            }
        }
        if let Some(seed) = flags.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &flags.out {
            self.output_dir = out.clone();
        }
        if let Some(a) = flags.algorithm {
            self.train.algorithm = a;
            self.algorithms = vec![AlgorithmVariant::plain(a)];
        }
        if let Some(k) = flags.k {
            self.train.k_soft = k;
            for v in &mut self.algorithms {
                v.k = Some(k);
            }
        }
        if let Some(beta) = flags.beta {
            self.train.beta = beta;
        }
        if let Some(len) = flags.seqlen {
            self.train.seq_len = len;
            self.lengths = vec![len];
        }
        if let Some(t) = flags.threads {
            self.threads = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if self.eval.samples == 0 {
            return Err(CliError::Config("eval.samples must be positive".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for v in &self.algorithms {
            v.apply(&self.train).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Variants for multi-algorithm commands: the configured list, or the
    /// single training algorithm.
    pub fn variants(&self) -> Vec<AlgorithmVariant> {
        if self.algorithms.is_empty() {
            vec![AlgorithmVariant::plain(self.train.algorithm)]
        } else {
            self.algorithms.clone()
        }
    }
}
