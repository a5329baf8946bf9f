//! Special functions needed by the evidential losses and predictive intervals.
//!
//! `lgamma` and `digamma` use their asymptotic (Stirling / de Moivre) series
//! for arguments of at least [`ASYMPTOTIC_FROM`] and upward recurrence below.

use super::NumericsError;

const ASYMPTOTIC_FROM: f64 = 10.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function for `x > 0`.
pub fn lgamma(x: f64) -> Result<f64, NumericsError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NumericsError::Domain { func: "lgamma", x });
    }
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    if x >= ASYMPTOTIC_FROM {
        return stirling(x);
    }
    // lgamma(x) = lgamma(x + n) - ln(x (x+1) ... (x+n-1))
    let mut shifted = x;
    let mut prod = 1.0;
    while shifted < ASYMPTOTIC_FROM {
        prod *= shifted;
        shifted += 1.0;
    }
    stirling(shifted) - prod.ln()
}

fn stirling(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number coefficients B_{2k} / (2k (2k-1)).
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360_360.0))))));
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series
}

/// Digamma function ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, NumericsError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NumericsError::Domain { func: "digamma", x });
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut acc = 0.0;
    let mut z = x;
    while z < ASYMPTOTIC_FROM {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + z.ln() - 0.5 * inv - series
}

/// Regularized incomplete beta function I_x(a, b).
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = lgamma_unchecked(a + b) - lgamma_unchecked(a) - lgamma_unchecked(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of the standard Student-t distribution with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = dof / (dof + t * t);
    let tail = 0.5 * beta_reg(0.5 * dof, 0.5, x);
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Quantile of the standard Student-t, found by bisection on the CDF to 1e-10.
pub fn student_t_quantile(p: f64, dof: f64) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::Domain {
            func: "student_t_quantile",
            x: p,
        });
    }
    if !(dof > 0.0) {
        return Err(NumericsError::Domain {
            func: "student_t_quantile",
            x: dof,
        });
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve in the upper tail and reflect.
    let upper = p.max(1.0 - p);
    let mut hi = 1.0;
    while student_t_cdf(hi, dof) < upper {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, dof) < upper {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    Ok(if p < 0.5 { -q } else { q })
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn lgamma_known_values() {
        assert!(lgamma(1.0).unwrap().abs() < 1e-14);
        assert!((lgamma(0.5).unwrap() - 0.5 * PI.ln()).abs() < 1e-14);
        assert!((lgamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-13);
        assert!((lgamma(0.5).unwrap() - 0.572_364_942_924_700_1).abs() < 1e-12);
        assert!((lgamma(5.0).unwrap() - 3.178_053_830_347_945_6).abs() < 1e-12);
    }

    #[test]
    fn lgamma_rejects_non_positive() {
        assert!(lgamma(0.0).is_err());
        assert!(lgamma(-1.5).is_err());
        assert!(lgamma(f64::NAN).is_err());
    }

    #[test]
    fn lgamma_recurrence() {
        let mut x = 0.5;
        while x <= 100.0 {
            let lhs = lgamma(x + 1.0).unwrap();
            let rhs = lgamma(x).unwrap() + x.ln();
            assert!((lhs - rhs).abs() < 1e-9, "x={x}: {lhs} vs {rhs}");
            x += 0.37;
        }
    }

    #[test]
    fn lgamma_matches_reference_library() {
        // statrs is an independent implementation (Lanczos).
        for &x in &[1e-3, 0.01, 0.1, 0.7, 1.3, 2.5, 9.99, 10.0, 17.3, 150.0, 1e4, 1e6] {
            let ours = lgamma(x).unwrap();
            let reference = statrs::function::gamma::ln_gamma(x);
            // At the top of the range the value itself is ~1e7, where one ulp
            // already exceeds 1e-10.
            let tol = 1e-10_f64.max(4.0 * f64::EPSILON * reference.abs());
            assert!((ours - reference).abs() < tol, "x={x}: {ours} vs {reference}");
        }
    }

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0).unwrap() + EULER).abs() < 1e-12);
        let half = -EULER - 2.0 * 2f64.ln();
        assert!((digamma(0.5).unwrap() - half).abs() < 1e-12);
        assert!((digamma(0.5).unwrap() + 1.963_510_026_021_423_5).abs() < 1e-12);
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.1, 1.0, 10.0] {
            let gap = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            assert!(gap.abs() < 1e-10, "x={x}: {gap}");
        }
    }

    #[test]
    fn digamma_matches_reference_library() {
        for &x in &[1e-3, 0.02, 0.3, 1.7, 6.0, 11.0, 123.4, 1e5, 1e6] {
            let ours = digamma(x).unwrap();
            let reference = statrs::function::gamma::digamma(x);
            assert!((ours - reference).abs() < 1e-8, "x={x}: {ours} vs {reference}");
        }
    }

    #[test]
    fn digamma_is_lgamma_derivative() {
        for &x in &[0.3, 2.0, 7.5, 40.0] {
            let h = 1e-5;
            let fd = (lgamma(x + h).unwrap() - lgamma(x - h).unwrap()) / (2.0 * h);
            assert!((fd - digamma(x).unwrap()).abs() < 1e-7);
        }
    }

    #[test]
    fn t_cdf_matches_reference_library() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &dof in &[1.0, 2.5, 4.0, 30.0] {
            let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
            for &t in &[-6.0, -1.2, -0.1, 0.3, 2.0, 8.0] {
                assert!((student_t_cdf(t, dof) - dist.cdf(t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn t_quantile_inverts_cdf() {
        for &dof in &[1.0, 3.0, 12.0, 1e6] {
            for &p in &[0.001, 0.025, 0.3, 0.5, 0.8, 0.975] {
                let q = student_t_quantile(p, dof).unwrap();
                assert!((student_t_cdf(q, dof) - p).abs() < 1e-9, "dof={dof} p={p}");
            }
        }
        let q = student_t_quantile(0.975, 1e6).unwrap();
        assert!((q - 1.959_963_985).abs() < 1e-4);
        assert!(student_t_quantile(0.0, 3.0).is_err());
        assert!(student_t_quantile(0.5, 0.0).is_err());
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(3.0) - (1.0 + 3f64.exp()).ln()).abs() < 1e-14);
    }
}
