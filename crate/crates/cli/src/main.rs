//! `edict`: generate data, train EDICT models, evaluate calibration and run
//! EDGR experiments from the command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use edict::PolicyKind;

use crate::config::{DatasetKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "edict", version, about = "Evidential continuous-time models for irregular time series")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run, training and classifier seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving this command's outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replace outputs that already exist.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a generated dataset as long-format CSV.
    Generate {
        #[arg(long, value_enum)]
        dataset: Option<DatasetKind>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Split, normalize and train a model on a CSV dataset.
    Train {
        /// Directory holding `{stem}_observations.csv`; defaults to --out.
        #[arg(long)]
        data: Option<PathBuf>,
        /// File stem of the dataset; defaults to the configured dataset name.
        #[arg(long)]
        stem: Option<String>,
    },
    /// Interpolation and extrapolation calibration on the test split.
    EvalCalibration {
        /// Directory written by `train`; defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Fit a classifier head on the frozen model.
    TrainClassifier {
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Accuracy under injected noise for each correction policy.
    NoiseSweep {
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Classify series with an optional correction policy.
    Infer {
        #[arg(long)]
        run: Option<PathBuf>,
        /// Directory of the series to classify; defaults to the run's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        stem: String,
        #[arg(long, value_enum, default_value = "edgr")]
        policy: PolicyArg,
        /// Band half-width in predictive standard deviations.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Full synthetic experiment: training, calibration, classifier and sweep.
    ReproduceSynthetic,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PolicyArg {
    None,
    Edgr,
    PopulationMean,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::None => PolicyKind::None,
            PolicyArg::Edgr => PolicyKind::Edgr,
            PolicyArg::PopulationMean => PolicyKind::PopulationMean,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    let ctx = commands::Context {
        out: cli.out.clone(),
        overwrite: cli.overwrite,
    };
    let run_dir = |r: &Option<PathBuf>| r.clone().unwrap_or_else(|| cli.out.clone());
    let written = match &cli.command {
        Command::Generate { dataset, samples } => {
            let mut cfg = cfg;
            if let Some(d) = dataset {
                cfg.data.dataset = *d;
            }
            if let Some(n) = samples {
                cfg.data.samples = *n;
            }
            cfg.validate()?;
            commands::generate(&ctx, &cfg)?
        }
        Command::Train { data, stem } => {
            cfg.validate()?;
            let stem = stem.clone().unwrap_or_else(|| cfg.data.dataset.stem().to_string());
            commands::train(&ctx, &cfg, &run_dir(data), &stem)?
        }
        Command::EvalCalibration { run } => {
            cfg.validate()?;
            commands::eval_calibration(&ctx, &cfg, &run_dir(run))?
        }
        Command::TrainClassifier { run } => {
            cfg.validate()?;
            commands::train_classifier(&ctx, &cfg, &run_dir(run))?
        }
        Command::NoiseSweep { run } => {
            cfg.validate()?;
            commands::noise_sweep(&ctx, &cfg, &run_dir(run))?
        }
        Command::Infer {
            run,
            data,
            stem,
            policy,
            eta,
        } => {
            let mut cfg = cfg;
            if let Some(e) = eta {
                cfg.edgr.eta = *e;
            }
            cfg.validate()?;
            let run = run_dir(run);
            let data = data.clone().unwrap_or_else(|| run.clone());
            commands::infer(&ctx, &cfg, &run, &data, stem, (*policy).into())?
        }
        Command::ReproduceSynthetic => {
            cfg.validate()?;
            commands::reproduce_synthetic(&ctx, &cfg)?
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
