//! Normal-Inverse-Wishart evidential distribution with a diagonal scale matrix.
//!
//! The differentiable losses are written against [`Ops`] so training can
//! record them on a tape; the `f64` entry points evaluate the same code with
//! [`Eval`]. With a diagonal Ψ every multivariate quantity factorizes per
//! feature, and partially observed vectors are handled by restricting each
//! sum to the observed dimensions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::special::digamma_unchecked;
use crate::numerics::{student_t_quantile, Array, Eval, Ops};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidentialError {
    #[error("invalid NIW parameters: {0}")]
    InvalidNiw(String),
    #[error("mask selects no observed dimension")]
    EmptyMask,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("loss weight {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("alpha must lie in [0, 0.5], got {0}")]
    AlphaOutOfRange(f64),
    #[error("predictive degrees of freedom must be positive, got {0}")]
    NonPositiveDof(f64),
}

/// Parameters {μ0, λ, Ψ = diag(ψ), ν} of a NIW distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    pub mu0: Vec<f64>,
    pub lambda: f64,
    pub psi: Vec<f64>,
    pub nu: f64,
}

impl NiwParams {
    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Checks λ > 0, ψ_d > 0 and ν > D + 1.
    pub fn validate(&self) -> Result<(), EvidentialError> {
        let d = self.dim();
        if self.psi.len() != d {
            return Err(EvidentialError::DimMismatch {
                expected: d,
                found: self.psi.len(),
            });
        }
        if !(self.lambda > 0.0) {
            return Err(EvidentialError::InvalidNiw(format!("lambda = {}", self.lambda)));
        }
        if let Some(p) = self.psi.iter().find(|p| !(**p > 0.0)) {
            return Err(EvidentialError::InvalidNiw(format!("psi entry = {p}")));
        }
        if !(self.nu > d as f64 + 1.0) {
            return Err(EvidentialError::InvalidNiw(format!(
                "nu = {} must exceed D + 1 = {}",
                self.nu,
                d + 1
            )));
        }
        if !self.mu0.iter().all(|m| m.is_finite()) {
            return Err(EvidentialError::InvalidNiw("non-finite mu0".into()));
        }
        Ok(())
    }

    pub fn bind<O: Ops>(&self, ops: &mut O) -> NiwVars<O::V> {
        NiwVars {
            mu0: ops.vector(self.mu0.clone()),
            lambda: ops.scalar(self.lambda),
            psi: ops.vector(self.psi.clone()),
            nu: ops.scalar(self.nu),
        }
    }
}

/// NIW parameters living on an [`Ops`] backend. `lambda` and `nu` are scalars.
#[derive(Debug, Clone)]
pub struct NiwVars<V> {
    pub mu0: V,
    pub lambda: V,
    pub psi: V,
    pub nu: V,
}

impl<V> NiwVars<V> {
    pub fn read<O: Ops<V = V>>(&self, ops: &O) -> NiwParams {
        NiwParams {
            mu0: ops.value(&self.mu0).data().to_vec(),
            lambda: ops.item(&self.lambda),
            psi: ops.value(&self.psi).data().to_vec(),
            nu: ops.item(&self.nu),
        }
    }
}

/// Location, diagonal scale and degrees of freedom of the posterior predictive t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveT {
    pub loc: Vec<f64>,
    pub scale_diag: Vec<f64>,
    pub dof: f64,
}

impl PredictiveT {
    /// Per-dimension variance `scale · dof / (dof − 2)`, defined for dof > 2.
    pub fn variance(&self) -> Option<Vec<f64>> {
        (self.dof > 2.0).then(|| {
            let f = self.dof / (self.dof - 2.0);
            self.scale_diag.iter().map(|s| s * f).collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub prediction: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Which negative log-likelihood expression to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllForm {
    /// The closed-form objective as printed, including its `(D/2)·log(π/ν)`
    /// term and without the `log λ` contribution of det(A).
    #[default]
    Boxed,
    /// Exact log-density of the posterior predictive Student-t.
    ExactT,
}

fn check_dims(d: usize, x: &[f64], mask: &[bool]) -> Result<usize, EvidentialError> {
    if x.len() != d {
        return Err(EvidentialError::DimMismatch {
            expected: d,
            found: x.len(),
        });
    }
    if mask.len() != d {
        return Err(EvidentialError::DimMismatch {
            expected: d,
            found: mask.len(),
        });
    }
    let observed = mask.iter().filter(|m| **m).count();
    if observed == 0 {
        return Err(EvidentialError::EmptyMask);
    }
    Ok(observed)
}

pub fn predictive_t(niw: &NiwParams) -> Result<PredictiveT, EvidentialError> {
    let d = niw.dim() as f64;
    let dof = niw.nu - d + 1.0;
    if !(dof > 0.0) {
        return Err(EvidentialError::NonPositiveDof(dof));
    }
    let factor = (1.0 + niw.lambda) / (niw.lambda * dof);
    Ok(PredictiveT {
        loc: niw.mu0.clone(),
        scale_diag: niw.psi.iter().map(|p| factor * p).collect(),
        dof,
    })
}

pub fn uncertainty(niw: &NiwParams) -> Result<UncertaintyDecomposition, EvidentialError> {
    let d = niw.dim() as f64;
    let denom = niw.nu - d - 1.0;
    if !(denom > 0.0) {
        return Err(EvidentialError::InvalidNiw(format!(
            "nu = {} must exceed D + 1 = {}",
            niw.nu,
            d + 1.0
        )));
    }
    let aleatoric: Vec<f64> = niw.psi.iter().map(|p| p / denom).collect();
    let epistemic = aleatoric.iter().map(|a| a / niw.lambda).collect();
    Ok(UncertaintyDecomposition {
        prediction: niw.mu0.clone(),
        aleatoric,
        epistemic,
    })
}

/// Masked negative log-likelihood on an [`Ops`] backend.
///
/// Callers must have checked that `mask` selects at least one dimension.
pub fn nll_ops<O: Ops>(
    ops: &mut O,
    niw: &NiwVars<O::V>,
    x: &[f64],
    mask: &[bool],
    form: NllForm,
) -> O::V {
    let d = x.len();
    let p = mask.iter().filter(|m| **m).count() as f64;
    let zeros = ops.vector(vec![0.0; d]);
    let xv = ops.vector(x.to_vec());
    let diff = ops.sub(&xv, &niw.mu0);
    let sq = ops.square(&diff);
    match form {
        NllForm::Boxed => {
            // -log Γ((ν+1)/2) + log Γ((ν−p+1)/2)
            let nu_p1 = ops.add_scalar(&niw.nu, 1.0);
            let a = ops.scale(&nu_p1, 0.5);
            let nu_b = ops.add_scalar(&niw.nu, 1.0 - p);
            let b = ops.scale(&nu_b, 0.5);
            let lg_a = ops.lgamma(&a);
            let lg_b = ops.lgamma(&b);
            let gamma_term = ops.sub(&lg_b, &lg_a);
            // (p/2)(log π − log ν)
            let log_nu = ops.log(&niw.nu);
            let neg_log_nu = ops.scale(&log_nu, -0.5 * p);
            let pi_term = ops.add_scalar(&neg_log_nu, 0.5 * p * PI.ln());
            // ½ Σ log ψ
            let log_psi = ops.log(&niw.psi);
            let log_psi = ops.select(mask, &log_psi, &zeros);
            let sum_log_psi = ops.sum(&log_psi);
            let det_term = ops.scale(&sum_log_psi, 0.5);
            // ((ν+1)/2) log(1 + λ Σ (x−μ)²/ψ)
            let ratio = ops.div(&sq, &niw.psi);
            let ratio = ops.select(mask, &ratio, &zeros);
            let quad = ops.sum(&ratio);
            let lq = ops.mul(&niw.lambda, &quad);
            let inner = ops.add_scalar(&lq, 1.0);
            let log_inner = ops.log(&inner);
            let tail = ops.mul(&a, &log_inner);

            let s1 = ops.add(&gamma_term, &pi_term);
            let s2 = ops.add(&s1, &det_term);
            ops.add(&s2, &tail)
        }
        NllForm::ExactT => {
            let dof = ops.add_scalar(&niw.nu, 1.0 - d as f64);
            // scale_d = (1+λ)/(λ dof) ψ_d
            let one_plus = ops.add_scalar(&niw.lambda, 1.0);
            let lam_dof = ops.mul(&niw.lambda, &dof);
            let factor = ops.div(&one_plus, &lam_dof);
            let factor_v = ops.broadcast(&factor, d);
            let scale = ops.mul(&factor_v, &niw.psi);

            let half_dof = ops.scale(&dof, 0.5);
            let dof_p = ops.add_scalar(&dof, p);
            let half_dof_p = ops.scale(&dof_p, 0.5);
            let lg_a = ops.lgamma(&half_dof_p);
            let lg_b = ops.lgamma(&half_dof);
            let gamma_term = ops.sub(&lg_b, &lg_a);

            let log_dof = ops.log(&dof);
            let log_dof = ops.scale(&log_dof, 0.5 * p);
            let pi_term = ops.add_scalar(&log_dof, 0.5 * p * PI.ln());

            let log_scale = ops.log(&scale);
            let log_scale = ops.select(mask, &log_scale, &zeros);
            let sum_log_scale = ops.sum(&log_scale);
            let det_term = ops.scale(&sum_log_scale, 0.5);

            let ratio = ops.div(&sq, &scale);
            let ratio = ops.select(mask, &ratio, &zeros);
            let quad = ops.sum(&ratio);
            let quad_over = ops.div(&quad, &dof);
            let inner = ops.add_scalar(&quad_over, 1.0);
            let log_inner = ops.log(&inner);
            let tail = ops.mul(&half_dof_p, &log_inner);

            let s1 = ops.add(&gamma_term, &pi_term);
            let s2 = ops.add(&s1, &det_term);
            ops.add(&s2, &tail)
        }
    }
}

/// Masked negative log-likelihood of `x` under the NIW's predictive.
pub fn nll(niw: &NiwParams, x: &[f64], mask: &[bool], form: NllForm) -> Result<f64, EvidentialError> {
    let observed = check_dims(niw.dim(), x, mask)?;
    if niw.psi.len() != niw.dim() {
        return Err(EvidentialError::DimMismatch {
            expected: niw.dim(),
            found: niw.psi.len(),
        });
    }
    if form == NllForm::Boxed && !(niw.nu - observed as f64 + 1.0 > 0.0) {
        return Err(EvidentialError::InvalidNiw(format!("nu = {}", niw.nu)));
    }
    let mut ev = Eval;
    let vars = niw.bind(&mut ev);
    Ok(nll_ops(&mut ev, &vars, x, mask, form).item())
}

/// One-observation conjugate NIW posterior, applied to observed dimensions.
pub fn conjugate_update(
    niw: &NiwParams,
    x: &[f64],
    mask: &[bool],
) -> Result<NiwParams, EvidentialError> {
    niw.validate()?;
    let d = niw.dim();
    if x.len() != d || mask.len() != d {
        return Err(EvidentialError::DimMismatch {
            expected: d,
            found: x.len().min(mask.len()),
        });
    }
    let lam = niw.lambda;
    let shrink = lam / (lam + 1.0);
    let mut mu0 = niw.mu0.clone();
    let mut psi = niw.psi.clone();
    for i in 0..d {
        if mask[i] {
            let innovation = x[i] - niw.mu0[i];
            mu0[i] = (lam * niw.mu0[i] + x[i]) / (lam + 1.0);
            psi[i] = niw.psi[i] + shrink * innovation * innovation;
        }
    }
    Ok(NiwParams {
        mu0,
        lambda: lam + 1.0,
        psi,
        nu: niw.nu + 1.0,
    })
}

/// KL(target ‖ q) summed over observed dimensions. The target is a constant.
pub fn niw_kl_ops<O: Ops>(ops: &mut O, target: &NiwParams, q: &NiwVars<O::V>, mask: &[bool]) -> O::V {
    let d = mask.len();
    let zeros = ops.vector(vec![0.0; d]);
    let p_count = mask.iter().filter(|m| **m).count() as f64;

    let a_p = target.nu / 2.0;
    let lg_ap = crate::numerics::special::lgamma_unchecked(a_p);
    let psi_ap = digamma_unchecked(a_p);

    // Inverse-gamma part, per dimension with a = ν/2, b = ψ_d/2.
    let a_q = ops.scale(&q.nu, 0.5);
    let lg_aq = ops.lgamma(&a_q);
    // (a_p − a_q) ψ(a_p) − lnΓ(a_p) + lnΓ(a_q): identical for every dimension.
    let neg_aq = ops.scale(&a_q, -psi_ap);
    let shared = ops.add(&neg_aq, &lg_aq);
    let shared = ops.add_scalar(&shared, a_p * psi_ap - lg_ap);
    let shared = ops.scale(&shared, p_count);

    let b_p: Vec<f64> = target.psi.iter().map(|v| v / 2.0).collect();
    let log_bp = ops.vector(b_p.iter().map(|v| v.ln()).collect());
    let b_q = ops.scale(&q.psi, 0.5);
    let log_bq = ops.log(&b_q);
    let log_ratio = ops.sub(&log_bp, &log_bq);
    let a_q_v = ops.broadcast(&a_q, d);
    let rate_term = ops.mul(&a_q_v, &log_ratio);
    let inv_bp = ops.vector(b_p.iter().map(|v| a_p / v).collect());
    let bq_over = ops.mul(&b_q, &inv_bp);
    let shape_term = ops.add_scalar(&bq_over, -a_p);
    let ig = ops.add(&rate_term, &shape_term);

    // Expected Gaussian part: ½[r − 1 − ln r + λq (μp − μq)² a_p/b_p], r = λq/λp.
    let r = ops.scale(&q.lambda, 1.0 / target.lambda);
    let ln_r = ops.log(&r);
    let r_minus = ops.sub(&r, &ln_r);
    let r_minus = ops.add_scalar(&r_minus, -1.0);
    let r_vec = ops.broadcast(&r_minus, d);
    let mu_p = ops.vector(target.mu0.clone());
    let dm = ops.sub(&mu_p, &q.mu0);
    let dm2 = ops.square(&dm);
    let weighted = ops.mul(&dm2, &inv_bp);
    let lam_q = ops.broadcast(&q.lambda, d);
    let mean_term = ops.mul(&lam_q, &weighted);
    let gauss = ops.add(&r_vec, &mean_term);
    let gauss = ops.scale(&gauss, 0.5);

    let per_dim = ops.add(&ig, &gauss);
    let per_dim = ops.select(mask, &per_dim, &zeros);
    let summed = ops.sum(&per_dim);
    ops.add(&summed, &shared)
}

pub fn niw_kl(target: &NiwParams, q: &NiwParams, mask: &[bool]) -> Result<f64, EvidentialError> {
    target.validate()?;
    q.validate()?;
    if target.dim() != q.dim() {
        return Err(EvidentialError::DimMismatch {
            expected: target.dim(),
            found: q.dim(),
        });
    }
    check_dims(q.dim(), &q.mu0, mask)?;
    let mut ev = Eval;
    let vars = q.bind(&mut ev);
    Ok(niw_kl_ops(&mut ev, target, &vars, mask).item())
}

/// (Σ_observed |μ0_d − x_d|)·(λ + ν)
pub fn evidential_reg_ops<O: Ops>(ops: &mut O, niw: &NiwVars<O::V>, x: &[f64], mask: &[bool]) -> O::V {
    let zeros = ops.vector(vec![0.0; x.len()]);
    let xv = ops.vector(x.to_vec());
    let diff = ops.sub(&niw.mu0, &xv);
    let err = ops.abs(&diff);
    let err = ops.select(mask, &err, &zeros);
    let l1 = ops.sum(&err);
    let evidence = ops.add(&niw.lambda, &niw.nu);
    ops.mul(&l1, &evidence)
}

pub fn evidential_reg(niw: &NiwParams, x: &[f64], mask: &[bool]) -> Result<f64, EvidentialError> {
    check_dims(niw.dim(), x, mask)?;
    let mut ev = Eval;
    let vars = niw.bind(&mut ev);
    Ok(evidential_reg_ops(&mut ev, &vars, x, mask).item())
}

pub fn total_loss(nll: f64, kl: f64, reg: f64, beta1: f64, beta2: f64) -> Result<LossBreakdown, EvidentialError> {
    if !(beta1 >= 0.0) {
        return Err(EvidentialError::NegativeWeight { name: "beta1", value: beta1 });
    }
    if !(beta2 >= 0.0) {
        return Err(EvidentialError::NegativeWeight { name: "beta2", value: beta2 });
    }
    Ok(LossBreakdown {
        nll,
        kl,
        reg,
        total: nll + beta1 * kl + beta2 * reg,
        beta1,
        beta2,
    })
}

/// Central `1 − 2α` interval of each marginal Student-t.
pub fn t_interval(pred: &PredictiveT, alpha: f64) -> Result<Vec<(f64, f64)>, EvidentialError> {
    if !(0.0..=0.5).contains(&alpha) {
        return Err(EvidentialError::AlphaOutOfRange(alpha));
    }
    if !(pred.dof > 0.0) {
        return Err(EvidentialError::NonPositiveDof(pred.dof));
    }
    let q = t_half_width_factor(pred.dof, alpha);
    Ok(pred
        .loc
        .iter()
        .zip(&pred.scale_diag)
        .map(|(&loc, &s)| {
            let half = q * s.sqrt();
            if half.is_finite() {
                (loc - half, loc + half)
            } else {
                (f64::NEG_INFINITY, f64::INFINITY)
            }
        })
        .collect())
}

/// Standardized upper quantile `t_{dof}(1 − α)`; infinite at α = 0.
pub(crate) fn t_half_width_factor(dof: f64, alpha: f64) -> f64 {
    if alpha == 0.5 {
        0.0
    } else if alpha == 0.0 {
        f64::INFINITY
    } else {
        student_t_quantile(1.0 - alpha, dof).expect("validated quantile arguments")
    }
}

/// Variance of each marginal predictive t (aleatoric + epistemic).
pub fn predictive_variance(niw: &NiwParams) -> Result<Vec<f64>, EvidentialError> {
    let u = uncertainty(niw)?;
    Ok(u.aleatoric.iter().zip(&u.epistemic).map(|(a, e)| a + e).collect())
}

impl From<&NiwParams> for Array {
    fn from(n: &NiwParams) -> Self {
        let mut v = n.mu0.clone();
        v.push(n.lambda);
        v.extend_from_slice(&n.psi);
        v.push(n.nu);
        Array::vector(v)
    }
}
