//! End-to-end synthetic reproduction and run manifests.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{fit_normalization, generate_synthetic, split_stratified, znormalize, DataError, Dataset, NormStats};
use crate::edgr::{noise_sweep, score_dataset, EdgrError, ReweightPolicy, SweepResult, DEFAULT_ETA};
use crate::evaluation::{eval_protocol, CalibrationReport, EvalError, HoldoutConfig};
use crate::training::{
    train_classifier, train_edict_from, ClassifierConfig, ClassifierOutput, EpochLog, TrainConfig, TrainOutput,
    TrainingError,
};
use crate::dynamics::EdictModel;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Edgr(#[from] EdgrError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

mod defaults {
    pub fn samples() -> usize {
        2000
    }
    pub fn split() -> [f64; 3] {
        [0.7, 0.1, 0.2]
    }
    pub fn eta() -> f64 {
        super::DEFAULT_ETA
    }
    pub fn sweep_seeds() -> Vec<u64> {
        vec![1, 2, 3]
    }
    pub fn yes() -> bool {
        true
    }
}

/// Training settings tuned for the synthetic task. The KL weight is zero:
/// any positive weight tried raised extrapolation error on this data.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        beta1: 0.0,
        learning_rate: 1e-2,
        batch_size: 5,
        ..TrainConfig::default()
    }
}

/// Everything the synthetic reproduction needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    /// Seeds generation, splitting and the evaluation hold-out.
    #[serde(default)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[serde(default = "defaults::split")]
    pub split: [f64; 3],
    #[serde(default = "synthetic_train_config")]
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub holdout: HoldoutConfig,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::sweep_seeds")]
    pub sweep_seeds: Vec<u64>,
    #[serde(default = "defaults::yes")]
    pub sweep: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |key, reason: String| Err(PipelineError::InvalidConfig { key, reason });
        if self.samples < 10 {
            return bad("samples", format!("must be at least 10, got {}", self.samples));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split", format!("must be three positive fractions summing to 1, got {:?}", self.split));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", format!("must be positive, got {}", self.eta));
        }
        if self.sweep && self.sweep_seeds.is_empty() {
            return bad("sweep_seeds", "must name at least one seed when the sweep is enabled".into());
        }
        if !(self.holdout.fraction > 0.0 && self.holdout.fraction < 1.0) {
            return bad("holdout.fraction", format!("must lie in (0, 1), got {}", self.holdout.fraction));
        }
        if !(self.holdout.t_cut > 0.0 && self.holdout.t_cut <= 1.0) {
            return bad("holdout.t_cut", format!("must lie in (0, 1], got {}", self.holdout.t_cut));
        }
        self.train.validate()?;
        self.classifier.validate()?;
        Ok(())
    }
}

/// Splits in model space plus the raw splits they were normalized from.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_raw: Dataset,
    pub val_raw: Dataset,
    pub test_raw: Dataset,
    pub stats: NormStats,
}

/// Generate, stratify and z-normalize with training statistics.
pub fn prepare_synthetic(samples: usize, split: [f64; 3], seed: u64) -> Result<PreparedData, PipelineError> {
    let ds = generate_synthetic(samples, seed)?;
    let (train_raw, val_raw, test_raw) = split_stratified(&ds, split, seed)?;
    let (train, mut others, stats) = znormalize(&train_raw, &[&val_raw, &test_raw])?;
    let test = others.pop().expect("two others");
    let val = others.pop().expect("two others");
    Ok(PreparedData {
        train,
        val,
        test,
        train_raw,
        val_raw,
        test_raw,
        stats,
    })
}

/// Headline numbers of one reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub best_epoch: usize,
    pub interpolation_mse: f64,
    pub interpolation_ece: f64,
    pub extrapolation_mse: f64,
    pub extrapolation_mse_std: f64,
    pub extrapolation_ece: f64,
    pub extrapolation_ece_std: f64,
    pub test_accuracy: f64,
    pub test_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub data: PreparedData,
    pub training: TrainOutput,
    pub interpolation: CalibrationReport,
    pub extrapolation: CalibrationReport,
    pub classifier: ClassifierOutput,
    pub test_accuracy: f64,
    pub test_auroc: Option<f64>,
    pub sweep: Option<SweepResult>,
}

impl SyntheticRun {
    pub fn summary(&self) -> SyntheticSummary {
        SyntheticSummary {
            best_epoch: self.training.best_epoch,
            interpolation_mse: self.interpolation.mse,
            interpolation_ece: self.interpolation.ece,
            extrapolation_mse: self.extrapolation.mse,
            extrapolation_mse_std: self.extrapolation.mse_std,
            extrapolation_ece: self.extrapolation.ece,
            extrapolation_ece_std: self.extrapolation.ece_series_std,
            test_accuracy: self.test_accuracy,
            test_auroc: self.test_auroc,
        }
    }
}

/// The three policies compared by the sweep: no correction, EDGR and
/// clipping against the population of training observations.
pub fn sweep_policies(train: &Dataset, eta: f64) -> Result<Vec<ReweightPolicy>, PipelineError> {
    let population = fit_normalization(train)?;
    Ok(vec![
        ReweightPolicy::none(),
        ReweightPolicy::edgr(eta),
        ReweightPolicy::population_mean(population, eta),
    ])
}

/// Runs the whole synthetic reproduction.
pub fn run_synthetic(cfg: &SyntheticConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<SyntheticRun, PipelineError> {
    cfg.validate()?;
    let data = prepare_synthetic(cfg.samples, cfg.split, cfg.seed)?;
    let model = EdictModel::new(cfg.train.model_config(data.train.features, 0), cfg.train.seed)?;
    let training = train_edict_from(model, &data.train, &data.val, &cfg.train, on_epoch)?;
    let (interpolation, extrapolation) = eval_protocol(&training.model, &data.test, cfg.holdout, cfg.seed)?;
    let classifier = train_classifier(&training.model, &data.train, &data.val, &cfg.classifier)?;
    let (test_accuracy, test_auroc) = score_dataset(&training.model, &classifier.head, &data.test, &ReweightPolicy::none())?;
    let sweep = if cfg.sweep {
        let policies = sweep_policies(&data.train, cfg.eta)?;
        Some(noise_sweep(
            &training.model,
            &classifier.head,
            &data.test_raw,
            &policies,
            &cfg.sweep_seeds,
            Some(&data.stats),
        )?)
    } else {
        None
    };
    Ok(SyntheticRun {
        data,
        training,
        interpolation,
        extrapolation,
        classifier,
        test_accuracy,
        test_auroc,
        sweep,
    })
}

/// Markdown summary tables: calibration
/// first, then accuracy per noise level and policy.
pub fn render_tables(summary: &SyntheticSummary, sweep: Option<&SweepResult>) -> String {
    let mut out = String::new();
    out.push_str("| Setting | MSE | ECE |\n|---|---|---|\n");
    out.push_str(&format!(
        "| Interpolation | {:.4} | {:.4} |\n",
        summary.interpolation_mse, summary.interpolation_ece
    ));
    out.push_str(&format!(
        "| Extrapolation | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
        summary.extrapolation_mse, summary.extrapolation_mse_std, summary.extrapolation_ece, summary.extrapolation_ece_std
    ));
    out.push_str(&format!("\nTest accuracy (level 0): {:.4}", summary.test_accuracy));
    if let Some(a) = summary.test_auroc {
        out.push_str(&format!(", AUROC {a:.4}"));
    }
    out.push('\n');
    if let Some(sweep) = sweep {
        let mut kinds = Vec::new();
        for s in &sweep.summary {
            if !kinds.contains(&s.policy) {
                kinds.push(s.policy);
            }
        }
        out.push_str(&format!("\nAccuracy under noise (η = {}):\n\n| Level |", sweep.eta));
        for k in &kinds {
            out.push_str(&format!(" {} |", k.name()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(kinds.len()));
        out.push('\n');
        let mut levels: Vec<u32> = sweep.summary.iter().map(|s| s.level).collect();
        levels.dedup();
        for level in levels {
            out.push_str(&format!("| {level} |"));
            for k in &kinds {
                match sweep.summary_for(level, *k) {
                    Some(s) => out.push_str(&format!(" {:.3} ± {:.3} |", s.accuracy_mean, s.accuracy_std)),
                    None => out.push_str(" |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String, std::io::Error> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Written next to the outputs of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    /// Hashes `dir/relative` and records it.
    pub fn record(&mut self, dir: &Path, relative: &str) -> Result<(), std::io::Error> {
        let path = dir.join(relative);
        let bytes = fs::metadata(&path)?.len();
        self.artifacts.push(ArtifactEntry {
            path: relative.to_string(),
            sha256: sha256_file(&path)?,
            bytes,
        });
        Ok(())
    }

    /// Artifacts whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>, std::io::Error> {
        let mut changed = Vec::new();
        for a in &self.artifacts {
            if sha256_file(&dir.join(&a.path))? != a.sha256 {
                changed.push(a.path.clone());
            }
        }
        Ok(changed)
    }
}
