use std::fs;
use std::path::{Path, PathBuf};

use gpssm_core::data::{read_trajectories, write_trajectories, ColumnSpec, Manifest, Trajectory};
use gpssm_core::inference::predict_open_loop;
use gpssm_core::rng;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::CliError;
use crate::experiment::{read_records, sweep_rows, write_sweep_csv, Experiment, ModelBundle, ResultRecord, RunDir};
use crate::table::Table;

/// Directory that relative paths inside a config file refer to.
pub fn config_base(path: Option<&Path>) -> PathBuf {
    path.and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Report {
    pub run_dir: PathBuf,
    pub records: Vec<ResultRecord>,
    /// Human-readable summary for the terminal.
    pub text: String,
}

fn run_and_save(exp: &Experiment, dir: &RunDir, specs: &[crate::experiment::RunSpec]) -> Result<Vec<ResultRecord>, CliError> {
    let runs = exp.run_all(specs)?;
    for run in &runs {
        dir.save(run)?;
    }
    Ok(runs.into_iter().map(|r| r.record).collect())
}

fn record_lines(records: &[ResultRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{} seed {} len {}: rmse {:.4} (raw {:.4}), log-lik {:.3}\n",
                r.algorithm, r.seed, r.seqlen, r.rmse, r.rmse_raw, r.log_likelihood
            )
        })
        .collect()
}

/// `train`: one record per seed for the configured algorithm.
pub fn train(config: ExperimentConfig, base: &Path) -> Result<Report, CliError> {
    let exp = Experiment::load(config, base)?;
    let dir = RunDir::create(&exp.config.output_dir, &exp.config.name)?;
    dir.write_config(&exp.config)?;
    let records = run_and_save(&exp, &dir, &exp.train_specs())?;
    Ok(Report {
        text: record_lines(&records),
        run_dir: dir.path,
        records,
    })
}

/// `seqlen-sweep`: every algorithm at every length and seed, plus a
/// plot-ready CSV of mean and std per (algorithm, length).
pub fn seqlen_sweep(config: ExperimentConfig, base: &Path) -> Result<Report, CliError> {
    let exp = Experiment::load(config, base)?;
    let dir = RunDir::create(&exp.config.output_dir, &exp.config.name)?;
    dir.write_config(&exp.config)?;
    let records = run_and_save(&exp, &dir, &exp.sweep_specs())?;
    let rows = sweep_rows(&records);
    write_sweep_csv(&dir.path.join("seqlen.csv"), &rows)?;
    let text = rows
        .iter()
        .map(|r| format!("{} len {}: rmse {:.4} ({:.4}) over {} runs\n", r.algorithm, r.seqlen, r.rmse_mean, r.rmse_std, r.runs))
        .collect();
    Ok(Report {
        run_dir: dir.path,
        records,
        text,
    })
}

/// `benchmark`: runs every configuration's algorithms over its seeds,
/// adds previously recorded results, and aggregates everything into a
/// `mean (std)` table.
pub fn benchmark(
    configs: Vec<(ExperimentConfig, PathBuf)>,
    result_files: &[PathBuf],
    out: &Path,
) -> Result<Report, CliError> {
    let dir = RunDir::create(out, "benchmark")?;
    let mut records = Vec::new();
    for path in result_files {
        records.extend(read_records(path)?);
    }
    for (config, base) in configs {
        let exp = Experiment::load(config, &base)?;
        records.extend(run_and_save(&exp, &dir, &exp.benchmark_specs())?);
    }
    if records.is_empty() {
        return Err(CliError::Config("benchmark needs at least one config or results file".into()));
    }
    let table = Table::from_records(&records);
    table.write_csv(&dir.path.join("benchmark.csv"))?;
    let mut text = table.to_text();
    fs::write(dir.path.join("benchmark.txt"), &text)?;
    for (d, a) in table.missing() {
        text.push_str(&format!("missing: {a} on {d}\n"));
    }
    Ok(Report {
        run_dir: dir.path,
        records,
        text,
    })
}

fn read_input(path: &Path, columns: &ColumnSpec) -> Result<Vec<Trajectory>, CliError> {
    match read_trajectories(path, columns) {
        Ok(t) => Ok(t),
        Err(_) if columns.seq.is_some() => {
            let plain = ColumnSpec {
                seq: None,
                ..columns.clone()
            };
            Ok(read_trajectories(path, &plain)?)
        }
        Err(e) => Err(e.into()),
    }
}

/// Options of `predict`.
#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub horizon: Option<usize>,
    pub samples: Option<usize>,
    pub seed: u64,
}

/// `predict`: open-loop predictions after the recognition lag, in the units
/// of the input, with `mean ± 1.96 σ` bands. Returns the CSV text.
pub fn predict(model_path: &Path, input: &Path, opts: &PredictOptions) -> Result<String, CliError> {
    let bundle = ModelBundle::load(model_path)?;
    let lag = bundle.model.recognition.lag;
    let trajs = read_input(input, &bundle.columns)?;
    let samples = opts.samples.unwrap_or(bundle.samples);
    if samples == 0 {
        return Err(CliError::Config("samples must be positive".into()));
    }
    let multi = trajs.len() > 1;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = Vec::new();
    if multi {
        header.push("seq".to_string());
    }
    header.push("t".to_string());
    for name in &bundle.columns.y {
        header.extend([format!("{name}_mean"), format!("{name}_lower"), format!("{name}_upper")]);
    }
    w.write_record(&header)?;
    for (k, raw) in trajs.iter().enumerate() {
        let len = opts.horizon.unwrap_or(raw.len()).min(raw.len());
        if len <= lag {
            return Err(CliError::Config(format!("horizon {len} must exceed the recognition lag {lag}")));
        }
        let t = bundle.stats.normalize(&raw.slice(0..len)?);
        let pred = predict_open_loop(&bundle.model, &t.y, &t.u, samples, bundle.strategy, rng::derive(opts.seed, k as u64))?
            .denormalize(&bundle.stats);
        for i in 0..pred.len() {
            let mut row = Vec::with_capacity(header.len());
            if multi {
                row.push((k + 1).to_string());
            }
            row.push((pred.start + i).to_string());
            for j in 0..pred.mean.cols() {
                let m = pred.mean.at(i, j);
                let half = 1.96 * pred.var.at(i, j).sqrt();
                row.extend([m.to_string(), (m - half).to_string(), (m + half).to_string()]);
            }
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Data(e.to_string()))
}

/// `simulate`: writes the configured simulated dataset as `train.csv`,
/// `test.csv` and a manifest that loads them back.
pub fn simulate(config: ExperimentConfig, base: &Path, seed: Option<u64>) -> Result<Report, CliError> {
    let mut config = config;
    match (&mut config.dataset, seed) {
        (DatasetConfig::Manifest { .. }, _) => {
            return Err(CliError::Config("simulate needs a simulated dataset (kind = dubins or linear)".into()))
        }
        (DatasetConfig::Dubins { seed: s, .. } | DatasetConfig::Linear { seed: s, .. }, Some(v)) => *s = v,
        _ => {}
    }
    let raw = config.dataset.load(base)?;
    let columns = config.dataset.columns(base, raw.d_u(), raw.d_y())?;
    let dir = RunDir::create(&config.output_dir, &config.name)?;
    dir.write_config(&config)?;
    write_trajectories(&dir.path.join("train.csv"), &raw.train, &columns)?;
    write_trajectories(&dir.path.join("test.csv"), &raw.test, &columns)?;
    let manifest = Manifest {
        name: raw.name.clone(),
        file: PathBuf::from("train.csv"),
        test_file: Some(PathBuf::from("test.csv")),
        columns,
        lag: raw.lag,
        train_fraction: 1.0,
        source: Some("gpssm simulate".into()),
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(dir.path.join("manifest.toml"), text)?;
    Ok(Report {
        text: format!(
            "{} train and {} test trajectories written to {}\n",
            raw.train.len(),
            raw.test.len(),
            dir.path.display()
        ),
        run_dir: dir.path,
        records: Vec::new(),
    })
}
