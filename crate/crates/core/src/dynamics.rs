//! Continuous-time hidden state: GRU-ODE propagation between observations,
//! a GRU-cell jump at each observation and the NIW output heads.
//!
//! The model is written once against [`Ops`]; [`EdictModel`] exposes the
//! plain `f64` entry points and training binds the same parameters to a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::IrregularSeries;
use crate::evidential::{NiwParams, NiwVars};
use crate::numerics::{Array, Eval, Ops};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what}: expected width {expected}, found {found}")]
    Width {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("negative integration interval {0}")]
    NegativeInterval(f64),
    #[error("observation times must be strictly increasing within [0, 1] (at index {index}: {time})")]
    UnsortedTimes { index: usize, time: f64 },
    #[error("query times must be sorted within [0, 1] (at index {index}: {time})")]
    UnsortedQueries { index: usize, time: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("missing or misshapen parameter `{0}`")]
    Parameter(String),
}

pub const DEFAULT_HIDDEN: usize = 50;
pub const DEFAULT_ENCODER: usize = 25;
pub const DEFAULT_HEAD_HIDDEN: usize = 25;
pub const DEFAULT_SUBSTEP: f64 = 0.01;
pub const LAMBDA_FLOOR: f64 = 1e-3;
pub const NU_FLOOR: f64 = 1e-3;

fn default_encoder() -> usize {
    DEFAULT_ENCODER
}
fn default_head_hidden() -> usize {
    DEFAULT_HEAD_HIDDEN
}
fn default_substep() -> f64 {
    DEFAULT_SUBSTEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub features: usize,
    pub hidden: usize,
    #[serde(default = "default_encoder")]
    pub encoder: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    /// Width of the static covariate vector; 0 makes h0 a learned constant.
    #[serde(default)]
    pub covariates: usize,
    /// Euler substep length in normalized time.
    #[serde(default = "default_substep")]
    pub substep: f64,
}

impl ModelConfig {
    pub fn new(features: usize, hidden: usize) -> Self {
        Self {
            features,
            hidden,
            encoder: DEFAULT_ENCODER,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            covariates: 0,
            substep: DEFAULT_SUBSTEP,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.features == 0 || self.hidden == 0 || self.encoder == 0 || self.head_hidden == 0 {
            return Err(DynamicsError::Config("features, hidden, encoder and head_hidden must be positive".into()));
        }
        if !(self.substep > 0.0 && self.substep.is_finite()) {
            return Err(DynamicsError::Config(format!("substep must be positive, got {}", self.substep)));
        }
        Ok(())
    }

    /// Number of Euler substeps used for an interval of length `dt`.
    pub fn substeps(&self, dt: f64) -> usize {
        if dt <= 0.0 {
            return 0;
        }
        ((dt / self.substep - 1e-9).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

/// Two-layer perceptron with a tanh hidden layer and linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

/// Every learnable tensor of the model, generic over its storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdictParams<T> {
    pub ode_z: Linear<T>,
    pub ode_r: Linear<T>,
    pub ode_g: Linear<T>,
    pub gru_u: Linear<T>,
    pub gru_r: Linear<T>,
    pub gru_n: Linear<T>,
    pub enc: Mlp<T>,
    pub head_mu: Mlp<T>,
    pub head_lambda: Mlp<T>,
    pub head_psi: Mlp<T>,
    pub head_nu: Mlp<T>,
    pub h0: Linear<T>,
}

macro_rules! for_each_linear {
    ($m:ident) => {
        $m!(ode_z);
        $m!(ode_r);
        $m!(ode_g);
        $m!(gru_u);
        $m!(gru_r);
        $m!(gru_n);
        $m!(enc.hidden);
        $m!(enc.out);
        $m!(head_mu.hidden);
        $m!(head_mu.out);
        $m!(head_lambda.hidden);
        $m!(head_lambda.out);
        $m!(head_psi.hidden);
        $m!(head_psi.out);
        $m!(head_nu.hidden);
        $m!(head_nu.out);
        $m!(h0);
    };
}

impl<T> EdictParams<T> {
    /// Visits every tensor in a fixed order with its dotted name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        macro_rules! v {
            ($($p:ident).+) => {
                f(concat!($(stringify!($p), "."),+ , "w"), &self.$($p).+.w);
                f(concat!($(stringify!($p), "."),+ , "b"), &self.$($p).+.b);
            };
        }
        for_each_linear!(v);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut T)) {
        macro_rules! v {
            ($($p:ident).+) => {
                f(concat!($(stringify!($p), "."),+ , "w"), &mut self.$($p).+.w);
                f(concat!($(stringify!($p), "."),+ , "b"), &mut self.$($p).+.b);
            };
        }
        for_each_linear!(v);
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<EdictParams<U>, E> {
        let mut lin = |name: &str, l: &Linear<T>| -> Result<Linear<U>, E> {
            Ok(Linear {
                w: f(&format!("{name}.w"), &l.w)?,
                b: f(&format!("{name}.b"), &l.b)?,
            })
        };
        macro_rules! mlp {
            ($name:literal, $m:expr) => {
                Mlp {
                    hidden: lin(concat!($name, ".hidden"), &$m.hidden)?,
                    out: lin(concat!($name, ".out"), &$m.out)?,
                }
            };
        }
        Ok(EdictParams {
            ode_z: lin("ode_z", &self.ode_z)?,
            ode_r: lin("ode_r", &self.ode_r)?,
            ode_g: lin("ode_g", &self.ode_g)?,
            gru_u: lin("gru_u", &self.gru_u)?,
            gru_r: lin("gru_r", &self.gru_r)?,
            gru_n: lin("gru_n", &self.gru_n)?,
            enc: mlp!("enc", self.enc),
            head_mu: mlp!("head_mu", self.head_mu),
            head_lambda: mlp!("head_lambda", self.head_lambda),
            head_psi: mlp!("head_psi", self.head_psi),
            head_nu: mlp!("head_nu", self.head_nu),
            h0: lin("h0", &self.h0)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EdictParams<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn zip_mut<U>(&mut self, other: &EdictParams<U>, mut f: impl FnMut(&str, &mut T, &U)) {
        let mut others = Vec::new();
        other.visit(|_, u| others.push(u));
        let mut rest = others.into_iter();
        self.visit_mut(|name, t| {
            let u = rest.next().expect("same field layout");
            f(name, t, u);
        });
    }
}

impl EdictParams<Array> {
    /// Expected (rows, cols) of every weight matrix, in visit order.
    fn shapes(cfg: &ModelConfig) -> EdictParams<(usize, usize)> {
        let (d, h, e, k, s) = (cfg.features, cfg.hidden, cfg.encoder, cfg.head_hidden, cfg.covariates);
        let lin = |rows, cols| Linear { w: (rows, cols), b: (rows, 0) };
        let mlp = |inp, out| Mlp { hidden: lin(k, inp), out: lin(out, k) };
        EdictParams {
            ode_z: lin(h, h),
            ode_r: lin(h, h),
            ode_g: lin(h, h),
            gru_u: lin(h, e + h),
            gru_r: lin(h, e + h),
            gru_n: lin(h, e + h),
            enc: Mlp {
                hidden: lin(e, 2 * d),
                out: lin(e, e),
            },
            head_mu: mlp(h, d),
            head_lambda: mlp(h, 1),
            head_psi: mlp(h, d),
            head_nu: mlp(h, 1),
            h0: lin(h, s),
        }
    }

    /// Uniform(±fan_in^{-1/2}) initialization from a fixed seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes(cfg);
        let mut fans = Vec::new();
        shapes.visit(|name, &(r, c)| {
            if name.ends_with(".w") {
                fans.push(c);
            }
            let _ = r;
        });
        let mut fan_iter = fans.into_iter();
        let mut current_fan = 1;
        shapes.map(|name, &(r, c)| {
            let is_bias = name.ends_with(".b");
            if !is_bias {
                current_fan = fan_iter.next().unwrap_or(1);
            }
            let n = if is_bias { r } else { r * c };
            let bound = if current_fan == 0 { 0.0 } else { (current_fan as f64).powf(-0.5) };
            let data: Vec<f64> = (0..n)
                .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
                .collect();
            let mut a = if is_bias {
                Array::vector(data)
            } else {
                Array::matrix(r, c, data).expect("shape matches data")
            };
            a.set_requires_grad(true);
            a
        })
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), DynamicsError> {
        let shapes = Self::shapes(cfg);
        let mut expected = Vec::new();
        shapes.visit(|name, &(r, c)| {
            let shape = if name.ends_with(".b") { vec![r] } else { vec![r, c] };
            expected.push((name.to_string(), shape));
        });
        let mut i = 0;
        let mut bad = None;
        self.visit(|name, a| {
            if bad.is_none() && (expected[i].0 != name || expected[i].1 != a.shape()) {
                bad = Some(name.to_string());
            }
            i += 1;
        });
        match bad {
            Some(name) => Err(DynamicsError::Parameter(name)),
            None => Ok(()),
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, a| n += a.len());
        n
    }

    /// Places every tensor on `ops`; `Tape::param` for training, constants otherwise.
    pub fn bind<O: Ops>(&self, ops: &mut O, mut leaf: impl FnMut(&mut O, &Array) -> O::V) -> EdictParams<O::V> {
        self.map(|_, a| leaf(ops, a))
    }

    pub fn constants<O: Ops>(&self, ops: &mut O) -> EdictParams<O::V> {
        self.bind(ops, |ops, a| ops.constant(a.detached()))
    }
}

fn linear<O: Ops>(ops: &mut O, l: &Linear<O::V>, x: &O::V) -> O::V {
    ops.affine(&l.w, &l.b, x)
}

fn mlp<O: Ops>(ops: &mut O, m: &Mlp<O::V>, x: &O::V) -> O::V {
    let a = linear(ops, &m.hidden, x);
    let a = ops.tanh(&a);
    linear(ops, &m.out, &a)
}

/// h0 = tanh(W c + b).
pub fn init_hidden_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, covariates: &[f64]) -> O::V {
    let c = ops.vector(covariates.to_vec());
    let a = linear(ops, &p.h0, &c);
    ops.tanh(&a)
}

/// One explicit Euler step of dh/dt = (1 − z) ∘ (g − h).
pub fn ode_step_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, h: &O::V, dt: f64) -> O::V {
    let z = linear(ops, &p.ode_z, h);
    let z = ops.sigmoid(&z);
    let r = linear(ops, &p.ode_r, h);
    let r = ops.sigmoid(&r);
    let rh = ops.mul(&r, h);
    let g = linear(ops, &p.ode_g, &rh);
    let g = ops.tanh(&g);
    let gap = ops.sub(&g, h);
    let neg_z = ops.neg(&z);
    let keep = ops.add_scalar(&neg_z, 1.0);
    let dh = ops.mul(&keep, &gap);
    let step = ops.scale(&dh, dt);
    ops.add(h, &step)
}

pub fn ode_propagate_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, h: &O::V, dt: f64, substeps: usize) -> O::V {
    if substeps == 0 || dt == 0.0 {
        return h.clone();
    }
    let step = dt / substeps as f64;
    let mut h = h.clone();
    for _ in 0..substeps {
        h = ode_step_ops(ops, p, &h, step);
    }
    h
}

/// Encoder input is `[values ∘ mask, mask]`.
pub fn encode_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, values: &[f64], mask: &[bool]) -> O::V {
    let mut input: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { *v } else { 0.0 })
        .collect();
    input.extend(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    let x = ops.vector(input);
    mlp(ops, &p.enc, &x)
}

/// GRU cell: u, r = σ(W[x; h] + b); n = tanh(W_n[x; r∘h] + b_n); h' = (1−u)∘h + u∘n.
pub fn gru_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, h: &O::V, x: &O::V) -> O::V {
    let xh = ops.concat(x, h);
    let u = linear(ops, &p.gru_u, &xh);
    let u = ops.sigmoid(&u);
    let r = linear(ops, &p.gru_r, &xh);
    let r = ops.sigmoid(&r);
    let rh = ops.mul(&r, h);
    let xrh = ops.concat(x, &rh);
    let n = linear(ops, &p.gru_n, &xrh);
    let n = ops.tanh(&n);
    // h + u∘(n − h)
    let delta = ops.sub(&n, h);
    let moved = ops.mul(&u, &delta);
    ops.add(h, &moved)
}

pub fn niw_ops<O: Ops>(ops: &mut O, p: &EdictParams<O::V>, h: &O::V, features: usize) -> NiwVars<O::V> {
    let mu0 = mlp(ops, &p.head_mu, h);
    let raw_lambda = mlp(ops, &p.head_lambda, h);
    let raw_psi = mlp(ops, &p.head_psi, h);
    let raw_nu = mlp(ops, &p.head_nu, h);
    let lambda = ops.softplus(&raw_lambda);
    let lambda = ops.add_scalar(&lambda, LAMBDA_FLOOR);
    let psi = ops.exp(&raw_psi);
    let nu = ops.softplus(&raw_nu);
    let nu = ops.add_scalar(&nu, features as f64 + 1.0 + NU_FLOOR);
    NiwVars { mu0, lambda, psi, nu }
}

/// One observation event of a generic unroll.
#[derive(Debug, Clone)]
pub struct StepOut<V> {
    pub time: f64,
    pub h_pre: V,
    pub niw_pre: NiwVars<V>,
    pub h_post: V,
    pub niw_post: NiwVars<V>,
}

#[derive(Debug, Clone)]
pub struct UnrollOut<V> {
    pub steps: Vec<StepOut<V>>,
    pub queries: Vec<(f64, NiwVars<V>)>,
    /// Last hidden state and its time (1.0 when propagated to the horizon).
    pub last: (V, f64),
}

pub fn check_series(series: &IrregularSeries, features: usize) -> Result<(), DynamicsError> {
    for (k, &t) in series.times.iter().enumerate() {
        let prev_ok = k == 0 || series.times[k - 1] < t;
        if !(prev_ok && (0.0..=1.0).contains(&t)) {
            return Err(DynamicsError::UnsortedTimes { index: k, time: t });
        }
        for (what, len) in [("values", series.values[k].len()), ("mask", series.masks[k].len())] {
            if len != features {
                return Err(DynamicsError::Width {
                    what,
                    expected: features,
                    found: len,
                });
            }
        }
    }
    if series.values.len() != series.times.len() || series.masks.len() != series.times.len() {
        return Err(DynamicsError::Width {
            what: "per-time rows",
            expected: series.times.len(),
            found: series.values.len().min(series.masks.len()),
        });
    }
    Ok(())
}

/// Full procedure on any backend. Each query branches off the latest state
/// strictly before it, so a query at an observation time yields the
/// pre-update distribution and queries never perturb the main path.
pub fn unroll_ops<O: Ops>(
    ops: &mut O,
    cfg: &ModelConfig,
    p: &EdictParams<O::V>,
    series: &IrregularSeries,
    queries: &[f64],
    to_horizon: bool,
) -> UnrollOut<O::V> {
    let d = cfg.features;
    let covariates = series.static_covariates.clone().unwrap_or_default();
    let mut h = init_hidden_ops(ops, p, &covariates);
    let mut t = 0.0;
    let mut steps = Vec::with_capacity(series.len());
    let mut out_queries = Vec::with_capacity(queries.len());
    let mut qi = 0;

    let mut answer_queries_until = |ops: &mut O, h: &O::V, t: f64, limit: f64, inclusive: bool, qi: &mut usize| {
        while *qi < queries.len() && (queries[*qi] < limit || (inclusive && queries[*qi] <= limit)) {
            let q = queries[*qi];
            let dt = (q - t).max(0.0);
            let hq = ode_propagate_ops(ops, p, h, dt, cfg.substeps(dt));
            out_queries.push((q, niw_ops(ops, p, &hq, d)));
            *qi += 1;
        }
    };

    for k in 0..series.len() {
        let tk = series.times[k];
        answer_queries_until(ops, &h, t, tk, true, &mut qi);
        let dt = tk - t;
        let h_pre = ode_propagate_ops(ops, p, &h, dt, cfg.substeps(dt));
        let niw_pre = niw_ops(ops, p, &h_pre, d);
        let enc = encode_ops(ops, p, &series.values[k], &series.masks[k]);
        let h_post = gru_ops(ops, p, &h_pre, &enc);
        let niw_post = niw_ops(ops, p, &h_post, d);
        steps.push(StepOut {
            time: tk,
            h_pre,
            niw_pre,
            h_post: h_post.clone(),
            niw_post,
        });
        h = h_post;
        t = tk;
    }
    answer_queries_until(ops, &h, t, f64::INFINITY, true, &mut qi);
    if to_horizon && t < 1.0 {
        let dt = 1.0 - t;
        h = ode_propagate_ops(ops, p, &h, dt, cfg.substeps(dt));
        t = 1.0;
    }
    UnrollOut {
        steps,
        queries: out_queries,
        last: (h, t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub time: f64,
    pub pre: HiddenState,
    pub niw_pre: NiwParams,
    pub post: HiddenState,
    pub niw_post: NiwParams,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
    pub queries: Vec<(f64, NiwParams)>,
    pub last: HiddenState,
}

/// Trained (or freshly initialized) model with frozen `f64` parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdictModel {
    pub config: ModelConfig,
    pub params: EdictParams<Array>,
}

impl EdictModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DynamicsError> {
        config.validate()?;
        let params = EdictParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: EdictParams<Array>) -> Result<Self, DynamicsError> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn features(&self) -> usize {
        self.config.features
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn eval_params(&self) -> EdictParams<Array> {
        self.params.map(|_, a| a.detached())
    }

    fn check_width(what: &'static str, expected: usize, found: usize) -> Result<(), DynamicsError> {
        if expected != found {
            return Err(DynamicsError::Width { what, expected, found });
        }
        Ok(())
    }

    fn check_state(&self, state: &HiddenState) -> Result<(), DynamicsError> {
        Self::check_width("hidden state", self.config.hidden, state.h.len())
    }

    pub fn init_hidden(&self, covariates: Option<&[f64]>) -> Result<HiddenState, DynamicsError> {
        let c = covariates.unwrap_or(&[]);
        Self::check_width("static covariates", self.config.covariates, c.len())?;
        let h = init_hidden_ops(&mut Eval, &self.eval_params(), c);
        Ok(HiddenState {
            h: h.into_data(),
            t: 0.0,
        })
    }

    pub fn ode_propagate(&self, state: &HiddenState, dt: f64) -> Result<HiddenState, DynamicsError> {
        self.ode_propagate_substeps(state, dt, self.config.substeps(dt))
    }

    /// Propagation with an explicit substep count.
    pub fn ode_propagate_substeps(&self, state: &HiddenState, dt: f64, substeps: usize) -> Result<HiddenState, DynamicsError> {
        if !(dt >= 0.0) {
            return Err(DynamicsError::NegativeInterval(dt));
        }
        self.check_state(state)?;
        let h = Array::vector(state.h.clone());
        let h = ode_propagate_ops(&mut Eval, &self.eval_params(), &h, dt, substeps);
        Ok(HiddenState {
            h: h.into_data(),
            t: state.t + dt,
        })
    }

    pub fn encode_observation(&self, values: &[f64], mask: &[bool]) -> Result<Vec<f64>, DynamicsError> {
        Self::check_width("values", self.config.features, values.len())?;
        Self::check_width("mask", self.config.features, mask.len())?;
        Ok(encode_ops(&mut Eval, &self.eval_params(), values, mask).into_data())
    }

    pub fn bayes_update(&self, state: &HiddenState, encoding: &[f64]) -> Result<HiddenState, DynamicsError> {
        self.check_state(state)?;
        Self::check_width("encoding", self.config.encoder, encoding.len())?;
        let h = Array::vector(state.h.clone());
        let x = Array::vector(encoding.to_vec());
        let h = gru_ops(&mut Eval, &self.eval_params(), &h, &x);
        Ok(HiddenState {
            h: h.into_data(),
            t: state.t,
        })
    }

    pub fn predict_niw(&self, state: &HiddenState) -> Result<NiwParams, DynamicsError> {
        self.check_state(state)?;
        let mut ev = Eval;
        let h = Array::vector(state.h.clone());
        let niw = niw_ops(&mut ev, &self.eval_params(), &h, self.config.features);
        Ok(niw.read(&ev))
    }

    /// Runs the propagate/update/predict procedure over `series`, emitting
    /// NIW parameters at each query time and, if asked, propagating to t = 1.
    pub fn unroll(&self, series: &IrregularSeries, queries: &[f64], to_horizon: bool) -> Result<Trajectory, DynamicsError> {
        check_series(series, self.config.features)?;
        Self::check_width(
            "static covariates",
            self.config.covariates,
            series.static_covariates.as_ref().map_or(0, |c| c.len()),
        )?;
        for (i, &q) in queries.iter().enumerate() {
            if !(0.0..=1.0).contains(&q) || (i > 0 && queries[i - 1] > q) {
                return Err(DynamicsError::UnsortedQueries { index: i, time: q });
            }
        }
        let mut ev = Eval;
        let p = self.eval_params();
        let out = unroll_ops(&mut ev, &self.config, &p, series, queries, to_horizon);
        let entries = out
            .steps
            .into_iter()
            .zip(&series.masks)
            .map(|(s, mask)| TrajectoryEntry {
                time: s.time,
                pre: HiddenState {
                    h: s.h_pre.into_data(),
                    t: s.time,
                },
                niw_pre: s.niw_pre.read(&ev),
                post: HiddenState {
                    h: s.h_post.into_data(),
                    t: s.time,
                },
                niw_post: s.niw_post.read(&ev),
                mask: mask.clone(),
            })
            .collect();
        let queries = out.queries.iter().map(|(t, n)| (*t, n.read(&ev))).collect();
        Ok(Trajectory {
            entries,
            queries,
            last: HiddenState {
                h: out.last.0.into_data(),
                t: out.last.1,
            },
        })
    }

    /// Hidden state at the horizon after consuming every observation.
    pub fn final_hidden(&self, series: &IrregularSeries) -> Result<HiddenState, DynamicsError> {
        Ok(self.unroll(series, &[], true)?.last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::numerics::{Tape, Var};

    fn model(d: usize, h: usize, seed: u64) -> EdictModel {
        EdictModel::new(ModelConfig::new(d, h), seed).unwrap()
    }

    fn zero_params(m: &mut EdictModel) {
        m.params.visit_mut(|_, a| a.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    #[test]
    fn shapes_and_names() {
        let m = model(3, 8, 1);
        let mut names = Vec::new();
        m.params.visit(|n, _| names.push(n.to_string()));
        assert_eq!(names.len(), 34);
        assert!(names.contains(&"head_psi.out.w".to_string()));
        assert_eq!(m.params.enc.hidden.w.shape(), &[25, 6]);
        assert_eq!(m.params.gru_n.w.shape(), &[8, 33]);
        m.params.check_shapes(&m.config).unwrap();
        let mut other = ModelConfig::new(3, 8);
        other.hidden = 9;
        assert!(m.params.check_shapes(&other).is_err());
        assert_eq!(m, model(3, 8, 1));
        assert_ne!(m, model(3, 8, 2));
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let m = model(2, 16, 3);
        let bound = 1.0 / (16f64).sqrt();
        assert!(m.params.ode_z.w.data().iter().all(|v| v.abs() <= bound));
        let enc_bound = 1.0 / 2.0;
        assert!(m.params.enc.hidden.w.data().iter().all(|v| v.abs() <= enc_bound));
        assert!(m.params.enc.hidden.w.data().iter().any(|v| v.abs() > bound));
    }

    #[test]
    fn init_hidden_cases() {
        let mut m = model(2, 4, 1);
        zero_params(&mut m);
        m.params.h0.b.data_mut().copy_from_slice(&[0.5, -1.0, 0.0, 2.0]);
        let h = m.init_hidden(None).unwrap();
        let expected: Vec<f64> = [0.5f64, -1.0, 0.0, 2.0].iter().map(|v| v.tanh()).collect();
        assert_eq!(h.h, expected);
        assert_eq!(h.t, 0.0);
        assert!(m.init_hidden(Some(&[1.0])).is_err());

        let mut cfg = ModelConfig::new(2, 4);
        cfg.covariates = 2;
        let m = EdictModel::new(cfg, 5).unwrap();
        let a = m.init_hidden(Some(&[0.3, -0.2])).unwrap();
        assert_eq!(a, m.init_hidden(Some(&[0.3, -0.2])).unwrap());
        assert!(m.init_hidden(None).is_err());
    }

    #[test]
    fn propagation_edge_cases() {
        let mut m = model(2, 6, 2);
        let s = m.init_hidden(None).unwrap();
        assert_eq!(m.ode_propagate(&s, 0.0).unwrap().h, s.h);
        assert!(m.ode_propagate(&s, -0.1).is_err());
        let moved = m.ode_propagate(&s, 0.3).unwrap();
        assert!((moved.t - 0.3).abs() < 1e-15);
        assert_ne!(moved.h, s.h);
        // Saturating z at 1 freezes the dynamics.
        m.params.ode_z.b.data_mut().iter_mut().for_each(|b| *b = 1e4);
        assert_eq!(m.ode_propagate(&s, 0.7).unwrap().h, s.h);
    }

    #[test]
    fn substep_rule() {
        let c = ModelConfig::new(1, 1);
        assert_eq!(c.substeps(0.0), 0);
        assert_eq!(c.substeps(1e-6), 1);
        assert_eq!(c.substeps(0.01), 1);
        assert_eq!(c.substeps(0.3), 30);
        assert_eq!(c.substeps(1.0), 100);
        assert_eq!(c.substeps(0.015), 2);
    }

    #[test]
    fn euler_converges_to_fine_reference() {
        let m = model(3, 20, 11);
        let s = HiddenState {
            h: (0..20).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect(),
            t: 0.0,
        };
        let coarse = m.ode_propagate_substeps(&s, 0.5, 100).unwrap();
        let fine = m.ode_propagate_substeps(&s, 0.5, 10_000).unwrap();
        let err = coarse.h.iter().zip(&fine.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn semigroup_with_constant_substep_length() {
        let m = model(2, 10, 4);
        let s = m.init_hidden(None).unwrap();
        // Dyadic intervals keep every substep length exactly 1/64.
        let ab = m.ode_propagate_substeps(&s, 0.75, 48).unwrap();
        let a = m.ode_propagate_substeps(&s, 0.25, 16).unwrap();
        let b = m.ode_propagate_substeps(&a, 0.5, 32).unwrap();
        assert_eq!(ab.h, b.h);
    }

    #[test]
    fn state_stays_in_unit_cube() {
        let m = model(3, 12, 8);
        let ds = generate_synthetic(10, 3).unwrap();
        for s in &ds.series {
            let tr = m.unroll(s, &[0.05, 0.5, 0.99], true).unwrap();
            for e in &tr.entries {
                assert!(e.pre.h.iter().chain(&e.post.h).all(|v| v.abs() < 1.0));
            }
            assert!(tr.last.h.iter().all(|v| v.abs() < 1.0));
        }
        // Large weights push toward the boundary without leaving it.
        let mut big = model(1, 6, 8);
        big.params.ode_g.w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        big.params.ode_g.b.data_mut().iter_mut().for_each(|v| *v = 20.0);
        let s = HiddenState { h: vec![0.999; 6], t: 0.0 };
        let out = big.ode_propagate(&s, 1.0).unwrap();
        assert!(out.h.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn encoder_masking() {
        let m = model(3, 5, 1);
        let a = m.encode_observation(&[1.0, 0.0, -2.0], &[true, false, true]).unwrap();
        let b = m.encode_observation(&[1.0, 9.0, -2.0], &[true, false, true]).unwrap();
        assert_eq!(a.len(), DEFAULT_ENCODER);
        assert_eq!(a, b);
        let z = m.encode_observation(&[3.0, 4.0, 5.0], &[false; 3]).unwrap();
        assert_eq!(z, m.encode_observation(&[0.0; 3], &[false; 3]).unwrap());
        assert!(m.encode_observation(&[1.0], &[true]).is_err());
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn row_dot(w: &Array, r: usize, x: &[f64]) -> f64 {
        let cols = w.shape()[1];
        (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum()
    }

    #[test]
    fn gru_matches_hand_evaluation() {
        let m = model(2, 7, 21);
        let h: Vec<f64> = (0..7).map(|i| 0.1 * i as f64 - 0.3).collect();
        let x: Vec<f64> = (0..25).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let got = m.bayes_update(&HiddenState { h: h.clone(), t: 0.4 }, &x).unwrap();
        let p = &m.params;
        let xh: Vec<f64> = x.iter().chain(&h).copied().collect();
        let mut expected = Vec::new();
        let r: Vec<f64> = (0..7).map(|i| sigmoid(row_dot(&p.gru_r.w, i, &xh) + p.gru_r.b.data()[i])).collect();
        let xrh: Vec<f64> = x.iter().copied().chain(h.iter().zip(&r).map(|(a, b)| a * b)).collect();
        for i in 0..7 {
            let u = sigmoid(row_dot(&p.gru_u.w, i, &xh) + p.gru_u.b.data()[i]);
            let n = (row_dot(&p.gru_n.w, i, &xrh) + p.gru_n.b.data()[i]).tanh();
            expected.push((1.0 - u) * h[i] + u * n);
        }
        for (a, b) in got.h.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got.t, 0.4);

        let mut frozen = m.clone();
        frozen.params.gru_u.b.data_mut().iter_mut().for_each(|v| *v = -1e4);
        assert_eq!(frozen.bayes_update(&HiddenState { h: h.clone(), t: 0.0 }, &x).unwrap().h, h);
    }

    #[test]
    fn niw_head_constraints() {
        let m = model(3, 9, 2);
        for scale in [0.0, 0.5, -0.99, 0.99] {
            let s = HiddenState { h: vec![scale; 9], t: 0.0 };
            let niw = m.predict_niw(&s).unwrap();
            assert_eq!(niw.mu0.len(), 3);
            assert_eq!(niw.psi.len(), 3);
            niw.validate().unwrap();
        }
        let mut z = model(2, 4, 1);
        zero_params(&mut z);
        z.params.head_mu.out.b.data_mut().copy_from_slice(&[0.5, -0.5]);
        z.params.head_psi.out.b.data_mut().copy_from_slice(&[0.0, 1.0]);
        let niw = z.predict_niw(&HiddenState { h: vec![0.3; 4], t: 0.0 }).unwrap();
        assert_eq!(niw.mu0, vec![0.5, -0.5]);
        assert_eq!(niw.psi, vec![1.0, 1f64.exp()]);
        assert!((niw.lambda - (2f64.ln() + 1e-3)).abs() < 1e-15);
        assert!((niw.nu - (2f64.ln() + 3.0 + 1e-3)).abs() < 1e-14);
    }

    fn series(times: &[f64], d: usize) -> IrregularSeries {
        IrregularSeries {
            id: "s".into(),
            times: times.to_vec(),
            values: times.iter().enumerate().map(|(k, _)| (0..d).map(|j| (k + j) as f64 * 0.3 - 0.5).collect()).collect(),
            masks: times.iter().enumerate().map(|(k, _)| (0..d).map(|j| (k + j) % 2 == 0).collect()).collect(),
            static_covariates: None,
            label: None,
        }
    }

    #[test]
    fn unroll_without_observations() {
        let m = model(2, 6, 3);
        let tr = m.unroll(&series(&[], 2), &[1.0], false).unwrap();
        assert!(tr.entries.is_empty());
        let h = m.ode_propagate(&m.init_hidden(None).unwrap(), 1.0).unwrap();
        assert_eq!(tr.queries, vec![(1.0, m.predict_niw(&h).unwrap())]);
    }

    #[test]
    fn unroll_matches_manual_composition() {
        let m = model(2, 6, 3);
        let s = series(&[0.2, 0.5, 0.65], 2);
        let queries = [0.1, 0.5, 0.6, 0.9];
        let tr = m.unroll(&s, &queries, true).unwrap();

        let mut st = m.init_hidden(None).unwrap();
        let q01 = m.predict_niw(&m.ode_propagate(&st, 0.1).unwrap()).unwrap();
        let mut posts = Vec::new();
        for k in 0..3 {
            let pre = m.ode_propagate(&st, s.times[k] - st.t).unwrap();
            assert_eq!(tr.entries[k].pre.h, pre.h);
            assert_eq!(tr.entries[k].niw_pre, m.predict_niw(&pre).unwrap());
            let enc = m.encode_observation(&s.values[k], &s.masks[k]).unwrap();
            st = m.bayes_update(&pre, &enc).unwrap();
            assert_eq!(tr.entries[k].post.h, st.h);
            posts.push(st.clone());
        }
        assert_eq!(tr.queries[0].1, q01);
        // Query at an observation time is the pre-update distribution.
        assert_eq!(tr.queries[1].1, tr.entries[1].niw_pre);
        let q06 = m.predict_niw(&m.ode_propagate(&posts[1], 0.6 - 0.5).unwrap()).unwrap();
        assert_eq!(tr.queries[2].1, q06);
        let q09 = m.predict_niw(&m.ode_propagate(&posts[2], 0.9 - 0.65).unwrap()).unwrap();
        assert_eq!(tr.queries[3].1, q09);
        let end = m.ode_propagate(&posts[2], 1.0 - 0.65).unwrap();
        assert_eq!(tr.last.h, end.h);
        assert_eq!(tr.last.t, 1.0);

        let pre_only = m.unroll(&series(&[0.5], 2), &[], false).unwrap();
        let h = m.ode_propagate(&m.init_hidden(None).unwrap(), 0.5).unwrap();
        assert_eq!(pre_only.entries[0].niw_pre, m.predict_niw(&h).unwrap());
    }

    #[test]
    fn unroll_rejects_bad_times() {
        let m = model(2, 4, 3);
        assert!(m.unroll(&series(&[0.5, 0.4], 2), &[], false).is_err());
        assert!(m.unroll(&series(&[0.5, 0.5], 2), &[], false).is_err());
        assert!(m.unroll(&series(&[0.5, 1.2], 2), &[], false).is_err());
        assert!(m.unroll(&series(&[0.5], 2), &[0.6, 0.3], false).is_err());
    }

    #[test]
    fn causality_and_masked_independence() {
        let m = model(3, 8, 5);
        let ds = generate_synthetic(5, 9).unwrap();
        for s in &ds.series {
            let full = m.unroll(s, &[], false).unwrap();
            let cut = s.truncate_before(0.5);
            let part = m.unroll(&cut, &[], false).unwrap();
            assert_eq!(part.entries[..], full.entries[..part.entries.len()]);

            let mut noisy = s.clone();
            for (vals, mask) in noisy.values.iter_mut().zip(&noisy.masks) {
                for (v, m) in vals.iter_mut().zip(mask) {
                    if !m {
                        *v = 1234.5;
                    }
                }
            }
            assert_eq!(m.unroll(&noisy, &[0.3], true).unwrap(), m.unroll(s, &[0.3], true).unwrap());
        }
    }

    #[test]
    fn tape_and_eval_agree() {
        let m = model(3, 6, 7);
        let s = &generate_synthetic(1, 2).unwrap().series[0];
        let ev_out = m.unroll(s, &[0.9], true).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, |t, a| t.param(a));
        let out = unroll_ops(&mut tape, &m.config, &p, s, &[0.9], true);
        let last: &Var = &out.last.0;
        assert_eq!(tape.value(last).data(), &ev_out.last.h[..]);
        assert_eq!(out.queries[0].1.read(&tape), ev_out.queries[0].1);
    }
}
