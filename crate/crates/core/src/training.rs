//! Adam with global-norm clipping, the unsupervised EDICT loop, the
//! frozen-representation classifier loop and JSON checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{holdout_observations, stream_rng, Dataset, HoldoutSplit, IrregularSeries, NormStats};
use crate::dynamics::{
    niw_ops, unroll_ops, DynamicsError, EdictModel, EdictParams, Linear, Mlp, ModelConfig, DEFAULT_ENCODER,
    DEFAULT_HEAD_HIDDEN, DEFAULT_HIDDEN, DEFAULT_SUBSTEP,
};
use crate::evaluation::{mse_from_predictions, predict_split, EvalError, HoldoutConfig, Mode};
use crate::evidential::{conjugate_update, evidential_reg_ops, niw_kl_ops, nll_ops, EvidentialError, NllForm};
use crate::numerics::{Array, Eval, NumericsError, Ops, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("parameter/gradient shape mismatch at index {index}: {expected} vs {found}")]
    ShapeMismatch { index: usize, expected: usize, found: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("series {0} has no label")]
    MissingLabel(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset has {found} features but the model expects {expected}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("non-finite loss encountered in epoch {0}")]
    NonFinite(usize),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn invalid(key: &'static str, reason: impl Into<String>) -> TrainingError {
    TrainingError::InvalidConfig {
        key,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update. Returns the pre-clipping gradient norm.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<f64, TrainingError> {
    if params.len() != grads.len() {
        return Err(TrainingError::ShapeMismatch {
            index: 0,
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(TrainingError::ShapeMismatch {
                index: i,
                expected: p.len(),
                found: g.len(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    for (i, p) in params.iter().enumerate() {
        if state.m.get(i).map(Vec::len) != Some(p.len()) || state.v.get(i).map(Vec::len) != Some(p.len()) {
            return Err(TrainingError::ShapeMismatch {
                index: i,
                expected: p.len(),
                found: state.m.get(i).map_or(0, Vec::len),
            });
        }
    }
    let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j] * clip;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

mod defaults {
    pub fn beta1() -> f64 {
        1.0
    }
    pub fn beta2() -> f64 {
        0.01
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn batch() -> usize {
        100
    }
    pub fn epochs() -> usize {
        40
    }
    pub fn clip() -> f64 {
        10.0
    }
    pub fn substep() -> f64 {
        super::DEFAULT_SUBSTEP
    }
    pub fn hidden() -> usize {
        super::DEFAULT_HIDDEN
    }
    pub fn encoder() -> usize {
        super::DEFAULT_ENCODER
    }
    pub fn head_hidden() -> usize {
        super::DEFAULT_HEAD_HIDDEN
    }
    pub fn adam_beta1() -> f64 {
        0.9
    }
    pub fn adam_beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn classifier_lr() -> f64 {
        1e-2
    }
    pub fn classifier_epochs() -> usize {
        200
    }
    pub fn classifier_batch() -> usize {
        64
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the KL constraint.
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    /// Weight of the evidential regularizer.
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::clip")]
    pub clip_norm: f64,
    #[serde(default = "defaults::substep")]
    pub substep: f64,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::encoder")]
    pub encoder: usize,
    #[serde(default = "defaults::head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub nll_form: NllForm,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "defaults::adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Hold-out used to score validation interpolation MSE.
    #[serde(default)]
    pub validation_holdout: HoldoutConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let nonneg = |key, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, format!("must be a non-negative number, got {v}")))
            }
        };
        let pos = |key, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, format!("must be positive, got {v}")))
            }
        };
        let unit = |key, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(key, format!("must lie in [0, 1), got {v}")))
            }
        };
        let count = |key, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(invalid(key, "must be at least 1"))
            }
        };
        nonneg("beta1", self.beta1)?;
        nonneg("beta2", self.beta2)?;
        nonneg("learning_rate", self.learning_rate)?;
        count("batch_size", self.batch_size)?;
        count("epochs", self.epochs)?;
        nonneg("clip_norm", self.clip_norm)?;
        pos("substep", self.substep)?;
        count("hidden", self.hidden)?;
        count("encoder", self.encoder)?;
        count("head_hidden", self.head_hidden)?;
        unit("adam_beta1", self.adam_beta1)?;
        unit("adam_beta2", self.adam_beta2)?;
        pos("adam_eps", self.adam_eps)?;
        let h = self.validation_holdout;
        if !(h.fraction > 0.0 && h.fraction < 1.0) {
            return Err(invalid("validation_holdout.fraction", format!("must lie in (0, 1), got {}", h.fraction)));
        }
        if !(h.t_cut > 0.0 && h.t_cut <= 1.0) {
            return Err(invalid("validation_holdout.t_cut", format!("must lie in (0, 1], got {}", h.t_cut)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: self.clip_norm,
        }
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = (epoch.saturating_sub(1)) as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn model_config(&self, features: usize, covariates: usize) -> ModelConfig {
        ModelConfig {
            features,
            hidden: self.hidden,
            encoder: self.encoder,
            head_hidden: self.head_hidden,
            covariates,
            substep: self.substep,
        }
    }
}

/// Per-observation means of each loss term for one series.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeriesLoss {
    pub nll: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

/// Loss of one series on any backend; `None` for a series with no observations.
///
/// NLL and the regularizer score the pre-update NIW; the KL term pulls the
/// post-update NIW toward the conjugate update of the pre-update NIW.
pub fn series_loss_ops<O: Ops>(
    ops: &mut O,
    cfg: &ModelConfig,
    p: &EdictParams<O::V>,
    series: &IrregularSeries,
    tc: &TrainConfig,
) -> Result<Option<(O::V, SeriesLoss)>, TrainingError> {
    if series.is_empty() {
        return Ok(None);
    }
    let out = unroll_ops(ops, cfg, p, series, &[], false);
    let mut total: Option<O::V> = None;
    let mut parts = SeriesLoss::default();
    for (k, step) in out.steps.iter().enumerate() {
        let x = &series.values[k];
        let mask = &series.masks[k];
        let nll = nll_ops(ops, &step.niw_pre, x, mask, tc.nll_form);
        let reg = evidential_reg_ops(ops, &step.niw_pre, x, mask);
        let target = conjugate_update(&step.niw_pre.read(ops), x, mask)?;
        let kl = niw_kl_ops(ops, &target, &step.niw_post, mask);
        parts.nll += ops.item(&nll);
        parts.kl += ops.item(&kl);
        parts.reg += ops.item(&reg);
        let kl_w = ops.scale(&kl, tc.beta1);
        let reg_w = ops.scale(&reg, tc.beta2);
        let a = ops.add(&nll, &kl_w);
        let term = ops.add(&a, &reg_w);
        total = Some(match total {
            None => term,
            Some(t) => ops.add(&t, &term),
        });
    }
    let inv = 1.0 / out.steps.len() as f64;
    let total = ops.scale(&total.expect("non-empty series"), inv);
    parts.nll *= inv;
    parts.kl *= inv;
    parts.reg *= inv;
    parts.total = ops.item(&total);
    Ok(Some((total, parts)))
}

/// Loss of one series evaluated without recording.
pub fn series_loss(model: &EdictModel, series: &IrregularSeries, tc: &TrainConfig) -> Result<Option<SeriesLoss>, TrainingError> {
    let mut ev = Eval;
    let p = model.params.constants(&mut ev);
    Ok(series_loss_ops(&mut ev, &model.config, &p, series, tc)?.map(|(_, l)| l))
}

/// Loss and gradient (in parameter visit order) of one series.
pub fn series_gradient(
    model: &EdictModel,
    series: &IrregularSeries,
    tc: &TrainConfig,
) -> Result<Option<(SeriesLoss, Vec<Vec<f64>>)>, TrainingError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |t, a| t.param(a));
    let Some((root, loss)) = series_loss_ops(&mut tape, &model.config, &p, series, tc)? else {
        return Ok(None);
    };
    let grads = tape.backward(root)?;
    let mut vars: Vec<(Var, usize)> = Vec::new();
    p.visit(|_, v| vars.push((*v, tape.value(v).len())));
    let out = vars
        .iter()
        .map(|(v, n)| Ok(grads.wrt(v)?.map_or_else(|| vec![0.0; *n], <[f64]>::to_vec)))
        .collect::<Result<Vec<_>, TrainingError>>()?;
    Ok(Some((loss, out)))
}

/// Mean loss and mean gradient over `batch`, reduced in series order.
pub fn batch_gradient(
    model: &EdictModel,
    batch: &[&IrregularSeries],
    tc: &TrainConfig,
) -> Result<Option<(SeriesLoss, Vec<Vec<f64>>)>, TrainingError> {
    let results: Vec<_> = batch
        .par_iter()
        .map(|s| series_gradient(model, s, tc))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<_> = results.into_iter().flatten().collect();
    if results.is_empty() {
        return Ok(None);
    }
    let n = results.len() as f64;
    let mut loss = SeriesLoss::default();
    let mut grad: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
    for (l, g) in &results {
        loss.nll += l.nll;
        loss.kl += l.kl;
        loss.reg += l.reg;
        loss.total += l.total;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    loss.nll /= n;
    loss.kl /= n;
    loss.reg /= n;
    loss.total /= n;
    grad.iter_mut().flatten().for_each(|g| *g /= n);
    Ok(Some((loss, grad)))
}

fn apply_adam(
    params: &mut EdictParams<Array>,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<f64, TrainingError> {
    let mut slices: Vec<&mut [f64]> = Vec::new();
    params.visit_mut(|_, a| slices.push(a.data_mut()));
    let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam_step(&mut slices, &g, state, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub val_interp_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EdictModel,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn check_features(ds: &Dataset, expected: usize) -> Result<(), TrainingError> {
    if ds.features != expected {
        return Err(TrainingError::FeatureMismatch {
            expected,
            found: ds.features,
        });
    }
    Ok(())
}

fn validation_mse(model: &EdictModel, split: &HoldoutSplit) -> Result<Option<f64>, TrainingError> {
    let preds = predict_split(model, split, Mode::Interpolation)?;
    Ok(mse_from_predictions(&preds).ok().map(|(m, _)| m))
}

/// Fits a fresh model; see [`train_edict_from`].
pub fn train_edict(train: &Dataset, val: &Dataset, tc: &TrainConfig) -> Result<TrainOutput, TrainingError> {
    let covariates = train
        .series
        .first()
        .and_then(|s| s.static_covariates.as_ref())
        .map_or(0, Vec::len);
    let model = EdictModel::new(tc.model_config(train.features, covariates), tc.seed)?;
    train_edict_from(model, train, val, tc, |_| {})
}

/// Mini-batch training of `model`, keeping the parameters with the best
/// validation interpolation MSE. `on_epoch` sees each log entry as it lands.
pub fn train_edict_from(
    mut model: EdictModel,
    train: &Dataset,
    val: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput, TrainingError> {
    tc.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    check_features(train, model.features())?;
    check_features(val, model.features())?;
    let val_split = if val.is_empty() {
        None
    } else {
        Some(holdout_observations(
            val,
            tc.validation_holdout.fraction,
            tc.validation_holdout.t_cut,
            tc.seed ^ 0x5eed,
        )?)
    };
    let mut adam = tc.adam();
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, EdictParams<Array>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=tc.epochs {
        adam.lr = tc.lr_at(epoch);
        let mut rng = stream_rng(tc.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = SeriesLoss::default();
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&IrregularSeries> = chunk.iter().map(|&i| &train.series[i]).collect();
            let Some((loss, grads)) = batch_gradient(&model, &batch, tc)? else {
                continue;
            };
            if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainingError::NonFinite(epoch));
            }
            norm_sum += apply_adam(&mut model.params, &grads, &mut state, &adam)?;
            sums.nll += loss.nll;
            sums.kl += loss.kl;
            sums.reg += loss.reg;
            sums.total += loss.total;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let val_mse = match &val_split {
            Some(split) => validation_mse(&model, split)?,
            None => None,
        };
        let entry = EpochLog {
            epoch,
            nll: sums.nll / b,
            kl: sums.kl / b,
            reg: sums.reg / b,
            total: sums.total / b,
            grad_norm: norm_sum / b,
            val_interp_mse: val_mse,
        };
        on_epoch(&entry);
        log.push(entry);
        let score = val_mse.unwrap_or(f64::INFINITY);
        let improved = match &best {
            None => true,
            Some((s, _, _)) => score < *s,
        };
        if improved {
            best = Some((score, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    // Without validation targets every score ties, so the final epoch is kept.
    let (best_epoch, params) = if val_split.is_none() || log.iter().all(|e| e.val_interp_mse.is_none()) {
        (tc.epochs, model.params.clone())
    } else {
        (best_epoch, params)
    };
    model.params = params;
    Ok(TrainOutput {
        model,
        log,
        best_epoch,
    })
}

/// SHA-256 over every parameter value in visit order.
pub fn params_checksum(params: &EdictParams<Array>) -> String {
    let mut h = Sha256::new();
    params.visit(|name, a| {
        h.update(name.as_bytes());
        for v in a.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Hidden width; defaults to half the model's hidden width.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "defaults::classifier_lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::classifier_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::classifier_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::clip")]
    pub clip_norm: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", format!("must be non-negative, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.hidden == Some(0) {
            return Err(invalid("hidden", "must be at least 1"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(invalid("clip_norm", "must be non-negative"));
        }
        Ok(())
    }
}

/// Two-layer head over h(T): tanh hidden layer, linear logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub classes: usize,
    pub mlp: Mlp<Array>,
}

fn uniform_linear(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Linear<Array> {
    let bound = (cols.max(1) as f64).powf(-0.5);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let w = Array::matrix(rows, cols, draw(rows * cols)).expect("shape matches data");
    let b = Array::vector(draw(rows));
    Linear { w, b }
}

fn head_logits<O: Ops>(ops: &mut O, m: &Mlp<O::V>, h: &[f64]) -> O::V {
    let x = ops.vector(h.to_vec());
    let a = ops.affine(&m.hidden.w, &m.hidden.b, &x);
    let a = ops.tanh(&a);
    ops.affine(&m.out.w, &m.out.b, &a)
}

fn mlp_map<T, U>(m: &Mlp<T>, mut f: impl FnMut(&T) -> U) -> Mlp<U> {
    Mlp {
        hidden: Linear {
            w: f(&m.hidden.w),
            b: f(&m.hidden.b),
        },
        out: Linear {
            w: f(&m.out.w),
            b: f(&m.out.b),
        },
    }
}

fn mlp_slices_mut(m: &mut Mlp<Array>) -> Vec<&mut [f64]> {
    vec![
        m.hidden.w.data_mut(),
        m.hidden.b.data_mut(),
        m.out.w.data_mut(),
        m.out.b.data_mut(),
    ]
}

impl ClassifierHead {
    pub fn new(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden_layer = uniform_linear(&mut rng, hidden, input);
        let out = uniform_linear(&mut rng, classes, hidden);
        Self {
            classes,
            mlp: Mlp {
                hidden: hidden_layer,
                out,
            },
        }
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut ev = Eval;
        let m = mlp_map(&self.mlp, |a| a.detached());
        head_logits(&mut ev, &m, h).into_data()
    }

    pub fn probabilities(&self, h: &[f64]) -> Vec<f64> {
        softmax(&self.logits(h))
    }

    pub fn predict(&self, h: &[f64]) -> usize {
        argmax(&self.logits(h))
    }

    pub fn named_arrays(&self) -> Vec<NamedArray> {
        [
            ("hidden.w", &self.mlp.hidden.w),
            ("hidden.b", &self.mlp.hidden.b),
            ("out.w", &self.mlp.out.w),
            ("out.b", &self.mlp.out.b),
        ]
        .into_iter()
        .map(|(n, a)| NamedArray::from_array(n, a))
        .collect()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Softmax cross-entropy of `logits` against class `y`.
pub fn cross_entropy_ops<O: Ops>(ops: &mut O, logits: &O::V, y: usize) -> O::V {
    let z = ops.value(logits).data().to_vec();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = ops.add_scalar(logits, -m);
    let e = ops.exp(&shifted);
    let s = ops.sum(&e);
    let lse = ops.log(&s);
    let zy = ops.index(&shifted, y);
    ops.sub(&lse, &zy)
}

/// h(T) for every series: unroll over all observations, then propagate to t = 1.
pub fn classifier_features(model: &EdictModel, ds: &Dataset) -> Result<Vec<Vec<f64>>, TrainingError> {
    ds.series
        .par_iter()
        .map(|s| Ok(model.final_hidden(s)?.h))
        .collect()
}

fn labels_of(ds: &Dataset, classes: usize) -> Result<Vec<usize>, TrainingError> {
    ds.series
        .iter()
        .map(|s| {
            let l = s.label.ok_or_else(|| TrainingError::MissingLabel(s.id.clone()))?;
            if l >= classes {
                return Err(TrainingError::LabelOutOfRange { label: l, classes });
            }
            Ok(l)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub head: ClassifierHead,
    pub log: Vec<ClassifierEpoch>,
    pub best_epoch: usize,
    pub encoder_checksum: String,
}

/// Trains a head on fixed features; returns the best-validation-accuracy head.
pub fn train_head(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    classes: usize,
    cc: &ClassifierConfig,
) -> Result<(ClassifierHead, Vec<ClassifierEpoch>, usize), TrainingError> {
    cc.validate()?;
    if train_x.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let input = train_x[0].len();
    let hidden = cc.hidden.unwrap_or((input / 2).max(1));
    let mut head = ClassifierHead::new(input, hidden, classes, cc.seed);
    let adam = AdamConfig {
        lr: cc.learning_rate,
        clip_norm: cc.clip_norm,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut log = Vec::with_capacity(cc.epochs);
    let mut best: Option<(f64, usize, ClassifierHead)> = None;
    let score = |head: &ClassifierHead, xs: &[Vec<f64>], ys: &[usize]| -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, y)| head.predict(x) == **y).count();
        hits as f64 / xs.len() as f64
    };
    for epoch in 1..=cc.epochs {
        let mut rng = stream_rng(cc.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cc.batch_size) {
            let mut tape = Tape::new();
            let m = mlp_map(&head.mlp, |a| tape.param(a));
            let mut total: Option<Var> = None;
            for &i in chunk {
                let z = head_logits(&mut tape, &m, &train_x[i]);
                let l = cross_entropy_ops(&mut tape, &z, train_y[i]);
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(&t, &l),
                });
            }
            let total = tape.scale(&total.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
            loss_sum += tape.item(&total) * chunk.len() as f64;
            let grads = tape.backward(total)?;
            let vars = [m.hidden.w, m.hidden.b, m.out.w, m.out.b];
            let g: Vec<Vec<f64>> = vars
                .iter()
                .map(|v| Ok(grads.wrt(v)?.map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)))
                .collect::<Result<_, TrainingError>>()?;
            let gs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            adam_step(&mut mlp_slices_mut(&mut head.mlp), &gs, &mut state, &adam)?;
        }
        let val_accuracy = score(&head, val_x, val_y);
        log.push(ClassifierEpoch {
            epoch,
            loss: loss_sum / train_x.len() as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_accuracy > *b) {
            best = Some((val_accuracy, epoch, head.clone()));
        }
    }
    let (_, best_epoch, head) = best.expect("at least one epoch");
    Ok((head, log, best_epoch))
}

/// Fits a classifier on h(T) of the frozen model.
pub fn train_classifier(
    model: &EdictModel,
    train: &Dataset,
    val: &Dataset,
    cc: &ClassifierConfig,
) -> Result<ClassifierOutput, TrainingError> {
    cc.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    check_features(train, model.features())?;
    check_features(val, model.features())?;
    let classes = train.classes.max(2);
    let train_y = labels_of(train, classes)?;
    let val_y = labels_of(val, classes)?;
    let before = params_checksum(&model.params);
    let train_x = classifier_features(model, train)?;
    let val_x = classifier_features(model, val)?;
    let (head, log, best_epoch) = train_head(&train_x, &train_y, &val_x, &val_y, classes, cc)?;
    let after = params_checksum(&model.params);
    assert_eq!(before, after, "classifier training must not touch the model");
    Ok(ClassifierOutput {
        head,
        log,
        best_epoch,
        encoder_checksum: after,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_array(name: &str, a: &Array) -> Self {
        Self {
            name: name.to_string(),
            shape: a.shape().to_vec(),
            data: a.data().to_vec(),
        }
    }

    fn to_array(&self) -> Result<Array, TrainingError> {
        Ok(Array::new(self.shape.clone(), self.data.clone())?)
    }
}

fn take_named(arrays: &[NamedArray], name: &str) -> Result<Array, TrainingError> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| TrainingError::MissingParameter(name.to_string()))?
        .to_array()
}

/// Model checkpoint: format version, config echo, named parameters and the
/// normalization the model was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub normalization: Option<NormStats>,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(model: &EdictModel, train_config: Option<TrainConfig>, normalization: Option<NormStats>) -> Self {
        let mut params = Vec::new();
        model.params.visit(|n, a| params.push(NamedArray::from_array(n, a)));
        Self {
            format_version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            train_config,
            normalization,
            params,
        }
    }

    pub fn model(&self) -> Result<EdictModel, TrainingError> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(TrainingError::Version(self.format_version));
        }
        let template = EdictParams::init(&self.model_config, 0);
        let params = template.try_map(|name, _| {
            let mut a = take_named(&self.params, name)?;
            a.set_requires_grad(true);
            Ok::<_, TrainingError>(a)
        })?;
        Ok(EdictModel::from_parts(self.model_config.clone(), params)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(TrainingError::Version(c.format_version));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierCheckpoint {
    pub format_version: u32,
    pub classes: usize,
    pub config: ClassifierConfig,
    /// Checksum of the model parameters the head was trained on.
    pub encoder_checksum: String,
    pub params: Vec<NamedArray>,
}

impl ClassifierCheckpoint {
    pub fn new(head: &ClassifierHead, config: ClassifierConfig, encoder_checksum: String) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            classes: head.classes,
            config,
            encoder_checksum,
            params: head.named_arrays(),
        }
    }

    pub fn head(&self) -> Result<ClassifierHead, TrainingError> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(TrainingError::Version(self.format_version));
        }
        let get = |n| take_named(&self.params, n);
        Ok(ClassifierHead {
            classes: self.classes,
            mlp: Mlp {
                hidden: Linear {
                    w: get("hidden.w")?,
                    b: get("hidden.b")?,
                },
                out: Linear {
                    w: get("out.w")?,
                    b: get("out.b")?,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Recomputes the NIW heads alone, for gradient checks on the output layer.
pub fn niw_head_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, h: &O::V, features: usize) -> O::V {
    let n = niw_ops(ops, p, h, features);
    let a = ops.concat(&n.mu0, &n.lambda);
    let b = ops.concat(&a, &n.psi);
    ops.concat(&b, &n.nu)
}
