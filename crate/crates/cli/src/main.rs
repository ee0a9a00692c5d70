use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpssm_cli::commands::{self, config_base, PredictOptions};
use gpssm_cli::{CliError, ExperimentConfig, Overrides};
use gpssm_core::inference::Algorithm;

#[derive(Parser)]
#[command(name = "gpssm", version, about = "Train and evaluate GP state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the commands that read an experiment config.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Experiment config (TOML); defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Base output directory (overrides GPSSM_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Algorithm: pr-ssm, vcdt or cbf-ssm.
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Soft-conditioning factor k.
    #[arg(long)]
    k: Option<f64>,
    /// KL weight β.
    #[arg(long)]
    beta: Option<f64>,
    /// Training window length.
    #[arg(long)]
    seqlen: Option<usize>,
    /// Worker threads (overrides GPSSM_THREADS and the config).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            algorithm: self.algorithm,
            k: self.k,
            beta: self.beta,
            seqlen: self.seqlen,
            threads: self.threads,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured algorithm once per seed and evaluate it.
    Train(Common),
    /// Train every configured algorithm over the seeds and tabulate test RMSE.
    Benchmark {
        /// Experiment configs to run; repeat for several datasets.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        /// Existing results files to include in the table.
        #[arg(long = "results")]
        results: Vec<PathBuf>,
        #[command(flatten)]
        common: BenchFlags,
    },
    /// Train every algorithm at several window lengths.
    SeqlenSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated window lengths (overrides the config).
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Open-loop predictions with ±1.96σ bands for a CSV file.
    Predict {
        /// Model file written by a training command.
        #[arg(long)]
        model: PathBuf,
        /// CSV with the model's control and output columns.
        #[arg(long)]
        input: PathBuf,
        /// Steps to cover, counted from the start and including the lag.
        #[arg(long)]
        horizon: Option<usize>,
        /// Sample trajectories (defaults to the model's evaluation setting).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured simulated dataset as CSV plus a manifest.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides applied to every config of a benchmark.
#[derive(Args, Clone, Debug, Default)]
struct BenchFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seqlen: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

fn environment() -> Vec<(String, String)> {
    ["GPSSM_OUT", "GPSSM_THREADS"]
        .iter()
        .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
        .collect()
}

fn load(path: Option<&Path>, flags: &Overrides) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&environment(), flags)?;
    Ok((cfg, config_base(path)))
}

fn finish(report: commands::Report) {
    print!("{}", report.text);
    println!("results in {}", report.run_dir.display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, base) = load(common.config.as_deref(), &common.overrides())?;
            finish(commands::train(cfg, &base)?);
        }
        Command::SeqlenSweep { common, lengths } => {
            let (mut cfg, base) = load(common.config.as_deref(), &common.overrides())?;
            if !lengths.is_empty() {
                cfg.lengths = lengths;
            }
            finish(commands::seqlen_sweep(cfg, &base)?);
        }
        Command::Benchmark {
            configs,
            results,
            common,
        } => {
            let flags = Overrides {
                seed: common.seed,
                out: common.out.clone(),
                k: common.k,
                beta: common.beta,
                seqlen: common.seqlen,
                threads: common.threads,
                ..Overrides::default()
            };
            let mut loaded = Vec::new();
            for p in &configs {
                loaded.push(load(Some(p), &flags)?);
            }
            let out = match (&common.out, loaded.first()) {
                (Some(o), _) => o.clone(),
                (None, Some((cfg, _))) => cfg.output_dir.clone(),
                (None, None) => load(None, &flags)?.0.output_dir,
            };
            finish(commands::benchmark(loaded, &results, &out)?);
        }
        Command::Predict {
            model,
            input,
            horizon,
            samples,
            seed,
            out,
        } => {
            let csv = commands::predict(&model, &input, &PredictOptions { horizon, samples, seed })?;
            match out {
                Some(path) => std::fs::write(&path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Simulate { config, seed, out } => {
            let flags = Overrides {
                out,
                ..Overrides::default()
            };
            let (cfg, base) = load(config.as_deref(), &flags)?;
            finish(commands::simulate(cfg, &base, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
