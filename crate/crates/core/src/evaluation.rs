//! Calibration (coverage curves, ECE, interval width), forecasting error and
//! classification metrics, plus the interpolation/extrapolation protocol.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{holdout_observations, Cell, DataError, Dataset, HoldoutSplit, IrregularSeries};
use crate::dynamics::{DynamicsError, EdictModel};
use crate::evidential::{predictive_t, t_half_width_factor, EvidentialError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no {0} targets to evaluate")]
    EmptyTargets(Mode),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("AUROC needs both classes present")]
    SingleClass,
    #[error("AUROC needs binary labels, found {0}")]
    NonBinaryLabel(usize),
    #[error("empty input")]
    Empty,
    #[error("curve is malformed: {0}")]
    BadCurve(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Interpolation,
    Extrapolation,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Interpolation => "interpolation",
            Mode::Extrapolation => "extrapolation",
        })
    }
}

pub const GRID_SIZE: usize = 20;

/// Confidence levels 1−2α: 0.05, 0.10, …, 0.95 and 0.9875 in place of 1.
pub fn confidence_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..GRID_SIZE).map(|i| i as f64 * 0.05).collect();
    g.push(0.9875);
    g
}

pub fn alpha_for_level(level: f64) -> f64 {
    (1.0 - level) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    pub width: Vec<f64>,
}

impl CoverageCurve {
    pub fn validate(&self) -> Result<(), EvalError> {
        let n = self.levels.len();
        if n == 0 || self.coverage.len() != n || self.width.len() != n {
            return Err(EvalError::BadCurve("levels, coverage and width lengths differ".into()));
        }
        if self.coverage.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(EvalError::BadCurve("coverage outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Unweighted mean of |coverage − level| over the grid.
pub fn ece(curve: &CoverageCurve) -> f64 {
    let n = curve.levels.len();
    if n == 0 {
        return 0.0;
    }
    curve
        .levels
        .iter()
        .zip(&curve.coverage)
        .map(|(l, c)| (c - l).abs())
        .sum::<f64>()
        / n as f64
}

/// Marginal predictive of one held-out cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPrediction {
    pub cell: Cell,
    pub loc: f64,
    pub scale: f64,
    pub dof: f64,
}

impl TargetPrediction {
    pub fn squared_error(&self) -> f64 {
        (self.cell.value - self.loc).powi(2)
    }
}

/// Predictions for `targets` given only the observations in `context`.
pub fn predict_targets(model: &EdictModel, context: &IrregularSeries, targets: &[Cell]) -> Result<Vec<TargetPrediction>, EvalError> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let mut times: Vec<f64> = targets.iter().map(|c| c.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let tr = model.unroll(context, &times, false)?;
    targets
        .iter()
        .map(|c| {
            let k = times.partition_point(|t| *t < c.time);
            let pred = predictive_t(&tr.queries[k].1)?;
            Ok(TargetPrediction {
                cell: *c,
                loc: pred.loc[c.feature],
                scale: pred.scale_diag[c.feature],
                dof: pred.dof,
            })
        })
        .collect()
}

/// Per-series predictions for one mode of a hold-out split, in series order.
pub fn predict_split(model: &EdictModel, split: &HoldoutSplit, mode: Mode) -> Result<Vec<Vec<TargetPrediction>>, EvalError> {
    let targets = match mode {
        Mode::Interpolation => &split.interpolation,
        Mode::Extrapolation => &split.extrapolation,
    };
    split
        .training
        .series
        .par_iter()
        .zip(targets.par_iter())
        .map(|(s, t)| predict_targets(model, s, t))
        .collect()
}

/// Coverage and mean width of the marginal t intervals over `levels`.
pub fn coverage_from_predictions(preds: &[TargetPrediction], levels: &[f64]) -> Result<CoverageCurve, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = preds.len() as f64;
    let mut coverage = Vec::with_capacity(levels.len());
    let mut width = Vec::with_capacity(levels.len());
    // Targets at one query time share dof, so factors are cached per dof.
    let mut cache: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut factors_for = |dof: f64| -> Vec<f64> {
        if let Some((_, f)) = cache.iter().find(|(d, _)| *d == dof) {
            return f.clone();
        }
        let f: Vec<f64> = levels.iter().map(|l| t_half_width_factor(dof, alpha_for_level(*l))).collect();
        cache.push((dof, f.clone()));
        f
    };
    let mut hits = vec![0usize; levels.len()];
    let mut widths = vec![0.0; levels.len()];
    for p in preds {
        if !(p.dof > 0.0) {
            return Err(EvidentialError::NonPositiveDof(p.dof).into());
        }
        let sd = p.scale.sqrt();
        let f = factors_for(p.dof);
        for (i, q) in f.iter().enumerate() {
            let half = q * sd;
            if (p.cell.value - p.loc).abs() <= half {
                hits[i] += 1;
            }
            widths[i] += 2.0 * half;
        }
    }
    for i in 0..levels.len() {
        coverage.push(hits[i] as f64 / n);
        width.push(widths[i] / n);
    }
    Ok(CoverageCurve {
        levels: levels.to_vec(),
        coverage,
        width,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-series MSE averaged across series, with its standard deviation.
/// Series without targets are skipped.
pub fn mse_from_predictions(per_series: &[Vec<TargetPrediction>]) -> Result<(f64, f64), EvalError> {
    let per: Vec<f64> = per_series
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| p.iter().map(|t| t.squared_error()).sum::<f64>() / p.len() as f64)
        .collect();
    if per.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(mean_std(&per))
}

pub fn coverage_curve(model: &EdictModel, split: &HoldoutSplit, mode: Mode) -> Result<CoverageCurve, EvalError> {
    let preds: Vec<TargetPrediction> = predict_split(model, split, mode)?.into_iter().flatten().collect();
    if preds.is_empty() {
        return Err(EvalError::EmptyTargets(mode));
    }
    coverage_from_predictions(&preds, &confidence_grid())
}

pub fn forecast_mse(model: &EdictModel, split: &HoldoutSplit, mode: Mode) -> Result<(f64, f64), EvalError> {
    let preds = predict_split(model, split, mode)?;
    mse_from_predictions(&preds).map_err(|_| EvalError::EmptyTargets(mode))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney AUROC with average ranks for ties; label 1 is positive.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(&l) = labels.iter().find(|l| **l > 1) {
        return Err(EvalError::NonBinaryLabel(l));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(l, _)| **l == 1).map(|(_, r)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutConfig {
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_t_cut")]
    pub t_cut: f64,
}

fn default_fraction() -> f64 {
    crate::data::DEFAULT_HOLDOUT_FRACTION
}
fn default_t_cut() -> f64 {
    crate::data::DEFAULT_T_CUT
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            fraction: default_fraction(),
            t_cut: default_t_cut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: Mode,
    pub t_cut: f64,
    pub curve: CoverageCurve,
    /// ECE of the curve pooled over every target cell.
    pub ece: f64,
    /// Spread of per-series ECE values.
    pub ece_series_std: f64,
    pub mse: f64,
    pub mse_std: f64,
    pub targets: usize,
    pub series: usize,
}

pub fn report_from_predictions(mode: Mode, t_cut: f64, per_series: &[Vec<TargetPrediction>]) -> Result<CalibrationReport, EvalError> {
    let pooled: Vec<TargetPrediction> = per_series.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(EvalError::EmptyTargets(mode));
    }
    let grid = confidence_grid();
    let curve = coverage_from_predictions(&pooled, &grid)?;
    let per_ece = per_series
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| coverage_from_predictions(p, &grid).map(|c| ece(&c)))
        .collect::<Result<Vec<_>, _>>()?;
    let (mse, mse_std) = mse_from_predictions(per_series)?;
    Ok(CalibrationReport {
        mode,
        t_cut,
        ece: ece(&curve),
        ece_series_std: mean_std(&per_ece).1,
        curve,
        mse,
        mse_std,
        targets: pooled.len(),
        series: per_ece.len(),
    })
}

/// Builds the hold-out split and reports both modes.
pub fn eval_protocol(model: &EdictModel, ds: &Dataset, holdout: HoldoutConfig, seed: u64) -> Result<(CalibrationReport, CalibrationReport), EvalError> {
    let split = holdout_observations(ds, holdout.fraction, holdout.t_cut, seed)?;
    eval_split(model, &split)
}

pub fn eval_split(model: &EdictModel, split: &HoldoutSplit) -> Result<(CalibrationReport, CalibrationReport), EvalError> {
    let interp = report_from_predictions(Mode::Interpolation, split.t_cut, &predict_split(model, split, Mode::Interpolation)?)?;
    let extrap = report_from_predictions(Mode::Extrapolation, split.t_cut, &predict_split(model, split, Mode::Extrapolation)?)?;
    Ok((interp, extrap))
}

/// One row per grid point: `level,coverage,width`.
pub fn write_curve_csv(curve: &CoverageCurve, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["level", "coverage", "width"])?;
    for i in 0..curve.levels.len() {
        w.write_record([curve.levels[i].to_string(), curve.coverage[i].to_string(), curve.width[i].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(report: &CalibrationReport, path: &Path) -> Result<(), EvalError> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<CalibrationReport, EvalError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
