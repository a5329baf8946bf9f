//! Strict JSON run configuration shared by every subcommand.

use std::path::Path;

use anyhow::{bail, Context, Result};
use edict::edgr::{PolicyKind, DEFAULT_ETA};
use edict::pipeline::SyntheticConfig;
use edict::{ClassifierConfig, HoldoutConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Demo2d,
}

impl DatasetKind {
    pub fn stem(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Demo2d => "demo2d",
        }
    }
}

fn default_dataset() -> DatasetKind {
    DatasetKind::Synthetic
}
fn default_samples() -> usize {
    2000
}
fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}
fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_sweep_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_policies() -> Vec<PolicyKind> {
    vec![PolicyKind::None, PolicyKind::Edgr, PolicyKind::PopulationMean]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_dataset")]
    pub dataset: DatasetKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgrSection {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_sweep_seeds")]
    pub sweep_seeds: Vec<u64>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
}

impl Default for EdgrSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// Every key is optional; unknown keys are rejected by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds generation, splitting and evaluation hold-outs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub holdout: HoldoutConfig,
    #[serde(default)]
    pub edgr: EdgrSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                anyhow::anyhow!("{inner}")
            } else {
                anyhow::anyhow!("at `{path}`: {inner}")
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// `--seed` replaces the run seed and the training and classifier seeds.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
            self.classifier.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic().validate()?;
        if self.edgr.policies.is_empty() {
            bail!("invalid value for `edgr.policies`: must name at least one policy");
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            samples: self.data.samples,
            seed: self.seed,
            split: self.data.split,
            train: self.train.clone(),
            classifier: self.classifier.clone(),
            holdout: self.holdout,
            eta: self.edgr.eta,
            sweep_seeds: self.edgr.sweep_seeds.clone(),
            sweep: true,
        }
    }
}
