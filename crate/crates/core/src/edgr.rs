//! Uncertainty-guided observation reweighting at inference time, the
//! population-mean clipping baseline and the noise-sweep driver.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{inject_noise, DataError, Dataset, IrregularSeries, NormStats, MAX_NOISE_LEVEL};
use crate::dynamics::{
    check_series, encode_ops, gru_ops, init_hidden_ops, niw_ops, ode_propagate_ops, DynamicsError, EdictModel,
};
use crate::evaluation::{accuracy, auroc, EvalError};
use crate::evidential::{predictive_t, EvidentialError};
use crate::numerics::{Array, Eval, Ops};
use crate::training::{argmax, ClassifierHead};

#[derive(Debug, Error)]
pub enum EdgrError {
    #[error("eta must be positive, got {0}")]
    InvalidEta(f64),
    #[error("population statistics are required for population-mean clipping and only then")]
    PopulationStats,
    #[error("population statistics cover {found} features, model has {expected}")]
    StatsWidth { expected: usize, found: usize },
    #[error("predictive dof {dof} ≤ 2 at time {time}: the predictive variance is undefined")]
    UndefinedVariance { dof: f64, time: f64 },
    #[error("classifier expects width {expected}, model hidden width is {found}")]
    HeadWidth { expected: usize, found: usize },
    #[error("no policies or seeds to sweep")]
    EmptySweep,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const DEFAULT_ETA: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    None,
    Edgr,
    PopulationMean,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::Edgr => "edgr",
            PolicyKind::PopulationMean => "population_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightPolicy {
    pub kind: PolicyKind,
    pub eta: f64,
    pub population: Option<NormStats>,
}

impl ReweightPolicy {
    pub fn none() -> Self {
        Self {
            kind: PolicyKind::None,
            eta: DEFAULT_ETA,
            population: None,
        }
    }

    pub fn edgr(eta: f64) -> Self {
        Self {
            kind: PolicyKind::Edgr,
            eta,
            population: None,
        }
    }

    pub fn population_mean(stats: NormStats, eta: f64) -> Self {
        Self {
            kind: PolicyKind::PopulationMean,
            eta,
            population: Some(stats),
        }
    }

    pub fn validate(&self, features: usize) -> Result<(), EdgrError> {
        if !(self.eta > 0.0) {
            return Err(EdgrError::InvalidEta(self.eta));
        }
        match (&self.kind, &self.population) {
            (PolicyKind::PopulationMean, Some(s)) => {
                if s.mean.len() != features || s.std.len() != features {
                    return Err(EdgrError::StatsWidth {
                        expected: features,
                        found: s.mean.len().min(s.std.len()),
                    });
                }
                Ok(())
            }
            (PolicyKind::PopulationMean, None) | (_, Some(_)) => Err(EdgrError::PopulationStats),
            _ => Ok(()),
        }
    }
}

/// Clips `x` into `[center − η·spread, center + η·spread]` when it lies outside.
pub fn clip_to_band(x: f64, center: f64, spread: f64, eta: f64) -> f64 {
    let half = eta * spread;
    if (x - center).abs() > half {
        if x > center {
            center + half
        } else {
            center - half
        }
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgrOutput {
    /// Class probabilities from the classifier head.
    pub scores: Vec<f64>,
    pub corrected: IrregularSeries,
    /// Number of cells whose value was clipped.
    pub clipped: usize,
}

impl EdgrOutput {
    pub fn predicted(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Sequential single pass: predict, clip the incoming observation into the
/// predictive band, update, and finally classify h(T).
pub fn edgr_infer(
    model: &EdictModel,
    head: &ClassifierHead,
    series: &IrregularSeries,
    policy: &ReweightPolicy,
) -> Result<EdgrOutput, EdgrError> {
    let cfg = &model.config;
    policy.validate(cfg.features)?;
    check_series(series, cfg.features)?;
    let head_in = head.mlp.hidden.w.shape()[1];
    if head_in != cfg.hidden {
        return Err(EdgrError::HeadWidth {
            expected: head_in,
            found: cfg.hidden,
        });
    }
    let mut ev = Eval;
    let p = model.params.constants(&mut ev);
    let covariates = series.static_covariates.clone().unwrap_or_default();
    let mut h: Array = init_hidden_ops(&mut ev, &p, &covariates);
    let mut t = 0.0;
    let mut corrected = series.clone();
    let mut clipped = 0;
    for k in 0..series.len() {
        let tk = series.times[k];
        let dt = tk - t;
        h = ode_propagate_ops(&mut ev, &p, &h, dt, cfg.substeps(dt));
        t = tk;
        let mask = &series.masks[k];
        let values = &mut corrected.values[k];
        match policy.kind {
            PolicyKind::None => {}
            PolicyKind::Edgr => {
                let niw = niw_ops(&mut ev, &p, &h, cfg.features).read(&ev);
                let pred = predictive_t(&niw)?;
                let var = pred.variance().ok_or(EdgrError::UndefinedVariance { dof: pred.dof, time: tk })?;
                for d in 0..cfg.features {
                    if mask[d] {
                        let v = clip_to_band(values[d], pred.loc[d], var[d].sqrt(), policy.eta);
                        clipped += (v != values[d]) as usize;
                        values[d] = v;
                    }
                }
            }
            PolicyKind::PopulationMean => {
                let stats = policy.population.as_ref().expect("validated");
                for d in 0..cfg.features {
                    if mask[d] {
                        let v = clip_to_band(values[d], stats.mean[d], stats.std[d], policy.eta);
                        clipped += (v != values[d]) as usize;
                        values[d] = v;
                    }
                }
            }
        }
        let enc = encode_ops(&mut ev, &p, values, mask);
        h = gru_ops(&mut ev, &p, &h, &enc);
    }
    if t < 1.0 {
        let dt = 1.0 - t;
        h = ode_propagate_ops(&mut ev, &p, &h, dt, cfg.substeps(dt));
    }
    Ok(EdgrOutput {
        scores: head.probabilities(ev.value(&h).data()),
        corrected,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: u32,
    pub policy: PolicyKind,
    pub seed: u64,
    pub accuracy: f64,
    /// Present for binary tasks.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub level: u32,
    pub policy: PolicyKind,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub auroc_mean: Option<f64>,
    pub auroc_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub eta: f64,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepResult {
    pub fn summary_for(&self, level: u32, policy: PolicyKind) -> Option<&SweepSummary> {
        self.summary.iter().find(|s| s.level == level && s.policy == policy)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Seed of the noise draw for one (level, seed) cell of the sweep.
pub fn noise_seed(seed: u64, level: u32) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(level)
}

/// Classifies every series of `ds` under `policy`.
pub fn classify_dataset(
    model: &EdictModel,
    head: &ClassifierHead,
    ds: &Dataset,
    policy: &ReweightPolicy,
) -> Result<Vec<EdgrOutput>, EdgrError> {
    ds.series
        .par_iter()
        .map(|s| edgr_infer(model, head, s, policy))
        .collect()
}

/// Accuracy (and binary AUROC) of `policy` on `ds`.
pub fn score_dataset(
    model: &EdictModel,
    head: &ClassifierHead,
    ds: &Dataset,
    policy: &ReweightPolicy,
) -> Result<(f64, Option<f64>), EdgrError> {
    let labels: Vec<usize> = ds.labels().ok_or(DataError::Unlabeled)?;
    let outs = classify_dataset(model, head, ds, policy)?;
    let preds: Vec<usize> = outs.iter().map(EdgrOutput::predicted).collect();
    let acc = accuracy(&preds, &labels)?;
    let auc = if head.classes == 2 {
        let scores: Vec<f64> = outs.iter().map(|o| o.scores[1]).collect();
        auroc(&scores, &labels).ok()
    } else {
        None
    };
    Ok((acc, auc))
}

/// For every noise level 0..=9, policy and seed: inject noise into `test`,
/// optionally normalize it, run inference and score it.
///
/// `normalize` maps the noisy dataset into model space, so noise can be
/// injected on the original scale of the data.
pub fn noise_sweep(
    model: &EdictModel,
    head: &ClassifierHead,
    test: &Dataset,
    policies: &[ReweightPolicy],
    seeds: &[u64],
    normalize: Option<&NormStats>,
) -> Result<SweepResult, EdgrError> {
    if policies.is_empty() || seeds.is_empty() {
        return Err(EdgrError::EmptySweep);
    }
    for p in policies {
        p.validate(model.features())?;
    }
    let mut rows = Vec::new();
    for level in 0..=MAX_NOISE_LEVEL {
        for &seed in seeds {
            let noisy = inject_noise(test, level, noise_seed(seed, level))?;
            let noisy = match normalize {
                Some(stats) => stats.apply_dataset(&noisy),
                None => noisy,
            };
            for policy in policies {
                let (acc, auc) = score_dataset(model, head, &noisy, policy)?;
                rows.push(SweepRow {
                    level,
                    policy: policy.kind,
                    seed,
                    accuracy: acc,
                    auroc: auc,
                });
            }
        }
    }
    let mut summary = Vec::new();
    for level in 0..=MAX_NOISE_LEVEL {
        for policy in policies {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.level == level && r.policy == policy.kind).collect();
            let accs: Vec<f64> = cell.iter().map(|r| r.accuracy).collect();
            let aucs: Option<Vec<f64>> = cell.iter().map(|r| r.auroc).collect();
            let (am, asd) = mean_std(&accs);
            let (um, usd) = match aucs {
                Some(a) => {
                    let (m, s) = mean_std(&a);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            summary.push(SweepSummary {
                level,
                policy: policy.kind,
                accuracy_mean: am,
                accuracy_std: asd,
                auroc_mean: um,
                auroc_std: usd,
            });
        }
    }
    let eta = policies.iter().find(|p| p.kind != PolicyKind::None).map_or(DEFAULT_ETA, |p| p.eta);
    Ok(SweepResult { eta, rows, summary })
}

/// `level,policy,seed,accuracy,auroc`
pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<(), EdgrError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "policy", "seed", "accuracy", "auroc"])?;
    for r in &result.rows {
        w.write_record([
            r.level.to_string(),
            r.policy.name().to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.auroc.map_or(String::new(), |a| a.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_json(result: &SweepResult, path: &Path) -> Result<(), EdgrError> {
    fs::write(path, serde_json::to_string_pretty(result)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::dynamics::ModelConfig;

    fn setup() -> (EdictModel, ClassifierHead, Dataset) {
        let mut cfg = ModelConfig::new(3, 8);
        cfg.encoder = 6;
        cfg.head_hidden = 5;
        let model = EdictModel::new(cfg, 3).unwrap();
        let head = ClassifierHead::new(8, 4, 2, 1);
        (model, head, generate_synthetic(12, 5).unwrap())
    }

    #[test]
    fn clip_band_cases() {
        assert_eq!(clip_to_band(5.0, 0.0, 1.0, 1.96), 1.96);
        assert_eq!(clip_to_band(-5.0, 0.0, 1.0, 1.96), -1.96);
        assert_eq!(clip_to_band(0.3, 0.3, 1.0, 1.96), 0.3);
        assert_eq!(clip_to_band(1.0, 0.0, 1.0, 1.96), 1.0);
    }

    #[test]
    fn policy_validation() {
        assert!(ReweightPolicy::edgr(0.0).validate(3).is_err());
        let stats = NormStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert!(ReweightPolicy::population_mean(stats.clone(), 1.96).validate(3).is_ok());
        assert!(ReweightPolicy::population_mean(stats.clone(), 1.96).validate(2).is_err());
        let mut bad = ReweightPolicy::edgr(1.0);
        bad.population = Some(stats);
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn none_matches_plain_pipeline_and_huge_eta_matches_none() {
        let (model, head, ds) = setup();
        for s in &ds.series {
            let plain = head.probabilities(&model.final_hidden(s).unwrap().h);
            let none = edgr_infer(&model, &head, s, &ReweightPolicy::none()).unwrap();
            assert_eq!(none.scores, plain);
            assert_eq!(none.corrected, *s);
            let huge = edgr_infer(&model, &head, s, &ReweightPolicy::edgr(1e9)).unwrap();
            assert_eq!(huge.scores, none.scores);
            assert_eq!(huge.clipped, 0);
        }
    }

    #[test]
    fn corrected_values_stay_in_band_and_clipping_is_idempotent() {
        let (model, head, ds) = setup();
        let noisy = inject_noise(&ds, 9, 3).unwrap();
        let policy = ReweightPolicy::edgr(0.5);
        let mut total = 0;
        for s in &noisy.series {
            let out = edgr_infer(&model, &head, s, &policy).unwrap();
            total += out.clipped;
            let tr = model.unroll(&out.corrected, &[], false).unwrap();
            for (k, e) in tr.entries.iter().enumerate() {
                let pred = predictive_t(&e.niw_pre).unwrap();
                let var = pred.variance().unwrap();
                for d in 0..3 {
                    if e.mask[d] {
                        let gap = (out.corrected.values[k][d] - pred.loc[d]).abs();
                        assert!(gap <= 0.5 * var[d].sqrt() * (1.0 + 1e-12));
                    }
                }
            }
            let again = edgr_infer(&model, &head, &out.corrected, &policy).unwrap();
            assert_eq!(again.corrected, out.corrected);
            assert_eq!(again.scores, out.scores);
        }
        assert!(total > 0);
    }

    #[test]
    fn larger_eta_clips_fewer_cells_at_the_first_observation() {
        // Later rows depend on earlier corrections, so only the first row is monotone in η.
        let (model, head, ds) = setup();
        let noisy = inject_noise(&ds, 7, 1).unwrap();
        for s in &noisy.series {
            let first = s.truncate_before(s.times[0] + 1e-9);
            assert_eq!(first.len(), 1);
            let counts: Vec<usize> = [0.25, 0.5, 1.0, 1.96, 4.0]
                .iter()
                .map(|&eta| edgr_infer(&model, &head, &first, &ReweightPolicy::edgr(eta)).unwrap().clipped)
                .collect();
            assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
        }
    }

    #[test]
    fn population_clipping_uses_stats() {
        let (model, head, ds) = setup();
        let stats = NormStats {
            mean: vec![0.0; 3],
            std: vec![0.1; 3],
        };
        let out = edgr_infer(&model, &head, &ds.series[0], &ReweightPolicy::population_mean(stats, 2.0)).unwrap();
        for (vals, mask) in out.corrected.values.iter().zip(&out.corrected.masks) {
            for (v, m) in vals.iter().zip(mask) {
                if *m {
                    assert!(v.abs() <= 0.2);
                }
            }
        }
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let (model, head, ds) = setup();
        let policies = [ReweightPolicy::none(), ReweightPolicy::edgr(DEFAULT_ETA)];
        let a = noise_sweep(&model, &head, &ds, &policies, &[1, 2], None).unwrap();
        assert_eq!(a.rows.len(), 10 * 2 * 2);
        assert_eq!(a.summary.len(), 20);
        let levels: std::collections::BTreeSet<u32> = a.rows.iter().map(|r| r.level).collect();
        assert_eq!(levels.len(), 10);
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        assert_eq!(a, noise_sweep(&model, &head, &ds, &policies, &[1, 2], None).unwrap());
        let dir = tempfile::tempdir().unwrap();
        write_sweep_csv(&a, &dir.path().join("s.csv")).unwrap();
        write_sweep_json(&a, &dir.path().join("s.json")).unwrap();
        assert!(noise_sweep(&model, &head, &ds, &[], &[1], None).is_err());
    }
}
