//! Acceptance suite. Every criterion prints exactly one `PASS`/`FAIL` line;
//! the test fails if any criterion does.
//!
//! The synthetic reproduction (criteria 4 and 5) trains a full-size model and
//! takes several minutes.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use statrs::function::gamma::ln_gamma;

use edict::data::{
    generate_demo2d, generate_synthetic, holdout_observations, inject_noise, save_csv, split_stratified, znormalize,
    CsvPaths, Dataset, IrregularSeries,
};
use edict::dynamics::{
    encode_ops, gru_ops, ode_step_ops, unroll_ops, EdictModel, EdictParams, ModelConfig,
};
use edict::edgr::{edgr_infer, noise_sweep, write_sweep_csv, PolicyKind, ReweightPolicy};
use edict::evaluation::{
    confidence_grid, coverage_from_predictions, ece, eval_protocol, write_report_json, CoverageCurve,
    HoldoutConfig, TargetPrediction,
};
use edict::evidential::{
    conjugate_update, evidential_reg, evidential_reg_ops, niw_kl, niw_kl_ops, nll, nll_ops, predictive_t,
    predictive_variance, uncertainty, NiwParams, NiwVars, NllForm,
};
use edict::numerics::{Array, Eval, Ops, Tape, Var};
use edict::pipeline::{run_synthetic, sha256_file, SyntheticConfig, SyntheticRun};
use edict::training::{
    niw_head_ops, series_gradient, series_loss, train_classifier, train_edict, Checkpoint, ClassifierConfig,
    TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- helpers

fn flat(p: &EdictParams<Array>) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit(|_, a| v.extend_from_slice(a.data()));
    v
}

fn set_flat(p: &mut EdictParams<Array>, v: &[f64]) {
    let mut i = 0;
    p.visit_mut(|_, a| {
        let n = a.len();
        a.data_mut().copy_from_slice(&v[i..i + n]);
        i += n;
    });
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f` at `x`.
fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - dn) / (2.0 * h)));
    }
    worst
}

fn random_niw(rng: &mut ChaCha8Rng, d: usize) -> NiwParams {
    NiwParams {
        mu0: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        lambda: rng.random_range(0.5..3.0),
        psi: (0..d).map(|_| rng.random_range(0.3..2.0)).collect(),
        nu: d as f64 + 1.5 + rng.random_range(0.5..6.0),
    }
}

fn niw_flat(n: &NiwParams) -> Vec<f64> {
    let mut v = n.mu0.clone();
    v.push(n.lambda);
    v.extend_from_slice(&n.psi);
    v.push(n.nu);
    v
}

fn niw_unflat(v: &[f64], d: usize) -> NiwParams {
    NiwParams {
        mu0: v[..d].to_vec(),
        lambda: v[d],
        psi: v[d + 1..2 * d + 1].to_vec(),
        nu: v[2 * d + 1],
    }
}

/// Gradient of a scalar NIW functional with respect to (μ0, λ, ψ, ν).
fn niw_grad(n: &NiwParams, f: &dyn Fn(&mut Tape, &NiwVars<Var>) -> Var) -> Vec<f64> {
    let mut t = Tape::new();
    let vars = NiwVars {
        mu0: t.param(&Array::vector(n.mu0.clone())),
        lambda: t.param(&Array::scalar(n.lambda)),
        psi: t.param(&Array::vector(n.psi.clone())),
        nu: t.param(&Array::scalar(n.nu)),
    };
    let root = f(&mut t, &vars);
    let g = t.backward(root).unwrap();
    let mut out = Vec::new();
    for v in [&vars.mu0, &vars.lambda, &vars.psi, &vars.nu] {
        let len = t.value(v).len();
        out.extend(g.wrt(v).unwrap().map_or(vec![0.0; len], <[f64]>::to_vec));
    }
    out
}

fn small_config(d: usize, h: usize) -> ModelConfig {
    let mut c = ModelConfig::new(d, h);
    c.encoder = 5;
    c.head_hidden = 4;
    c
}

/// Gradient of `f(params, h)` with respect to the flattened parameters followed by `h`.
fn model_grad(
    model: &EdictModel,
    h: &[f64],
    f: &dyn Fn(&mut Tape, &EdictParams<Var>, &Var) -> Var,
) -> Vec<f64> {
    let mut t = Tape::new();
    let p = model.params.bind(&mut t, |t, a| t.param(a));
    let hv = t.param(&Array::vector(h.to_vec()));
    let root = f(&mut t, &p, &hv);
    let g = t.backward(root).unwrap();
    let mut vars = Vec::new();
    p.visit(|_, v| vars.push(*v));
    vars.push(hv);
    let mut out = Vec::new();
    for v in &vars {
        let len = t.value(v).len();
        out.extend(g.wrt(v).unwrap().map_or(vec![0.0; len], <[f64]>::to_vec));
    }
    out
}

/// Evaluates the same functional on `Eval` from a flat (params, h) vector.
fn model_eval<'a>(
    model: &'a EdictModel,
    hlen: usize,
    f: &'a dyn Fn(&mut Eval, &EdictParams<Array>, &Array) -> Array,
) -> impl Fn(&[f64]) -> f64 + 'a {
    move |x: &[f64]| {
        let mut m = model.params.clone();
        let np = x.len() - hlen;
        set_flat(&mut m, &x[..np]);
        let h = Array::vector(x[np..].to_vec());
        let mut ev = Eval;
        let p = m.constants(&mut ev);
        f(&mut ev, &p, &h).item()
    }
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted_sum<O: Ops>(ops: &mut O, v: &O::V, w: &[f64]) -> O::V {
    let wv = ops.vector(w.to_vec());
    let m = ops.mul(v, &wv);
    ops.sum(&m)
}

// ---------------------------------------------------------------- 1. gradients

fn criterion_gradients() -> Outcome {
    let mut worst_component: f64 = 0.0;
    let mut names = Vec::new();

    // Evidential losses.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ev_worst: f64 = 0.0;
    for _ in 0..8 {
        let d = 3;
        let n = random_niw(&mut rng, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mask = vec![true, rng.random_bool(0.5), true];
        let target = conjugate_update(&random_niw(&mut rng, d), &x, &mask).unwrap();
        let funcs: Vec<(Box<dyn Fn(&mut Tape, &NiwVars<Var>) -> Var>, Box<dyn Fn(&NiwParams) -> f64>)> = vec![
            (
                Box::new(|t, v| nll_ops(t, v, &x, &mask, NllForm::Boxed)),
                Box::new(|n| nll(n, &x, &mask, NllForm::Boxed).unwrap()),
            ),
            (
                Box::new(|t, v| nll_ops(t, v, &x, &mask, NllForm::ExactT)),
                Box::new(|n| nll(n, &x, &mask, NllForm::ExactT).unwrap()),
            ),
            (
                Box::new(|t, v| niw_kl_ops(t, &target, v, &mask)),
                Box::new(|n| niw_kl(&target, n, &mask).unwrap()),
            ),
            (
                Box::new(|t, v| evidential_reg_ops(t, v, &x, &mask)),
                Box::new(|n| evidential_reg(n, &x, &mask).unwrap()),
            ),
        ];
        for (op, value) in &funcs {
            let g = niw_grad(&n, op.as_ref());
            let e = fd_check(|v| value(&niw_unflat(v, d)), &niw_flat(&n), &g);
            ev_worst = ev_worst.max(e);
        }
    }
    names.push(format!("losses {ev_worst:.1e}"));
    worst_component = worst_component.max(ev_worst);

    // GRU-ODE step, GRU update and NIW heads on a small random model.
    let cfg = small_config(3, 6);
    let model = EdictModel::new(cfg.clone(), 5).unwrap();
    let h0 = weights(6, 1).iter().map(|v| 0.8 * v).collect::<Vec<_>>();
    let w_h = weights(6, 2);
    let w_niw = weights(3 + 1 + 3 + 1, 3);
    let enc_in = weights(3, 4);
    let enc_mask = [true, false, true];
    let mut x0 = flat(&model.params);
    x0.extend_from_slice(&h0);

    let ode_g = model_grad(&model, &h0, &|t, p, h| {
        let o = ode_step_ops(t, p, h, 0.05);
        weighted_sum(t, &o, &w_h)
    });
    let ode_e = fd_check(
        model_eval(&model, 6, &|e, p, h| {
            let o = ode_step_ops(e, p, h, 0.05);
            weighted_sum(e, &o, &w_h)
        }),
        &x0,
        &ode_g,
    );
    names.push(format!("ode step {ode_e:.1e}"));

    let gru_g = model_grad(&model, &h0, &|t, p, h| {
        let x = encode_ops(t, p, &enc_in, &enc_mask);
        let o = gru_ops(t, p, h, &x);
        weighted_sum(t, &o, &w_h)
    });
    let gru_e = fd_check(
        model_eval(&model, 6, &|e, p, h| {
            let x = encode_ops(e, p, &enc_in, &enc_mask);
            let o = gru_ops(e, p, h, &x);
            weighted_sum(e, &o, &w_h)
        }),
        &x0,
        &gru_g,
    );
    names.push(format!("gru update {gru_e:.1e}"));

    let head_g = model_grad(&model, &h0, &|t, p, h| {
        let o = niw_head_ops(t, p, h, 3);
        weighted_sum(t, &o, &w_niw)
    });
    let head_e = fd_check(
        model_eval(&model, 6, &|e, p, h| {
            let o = niw_head_ops(e, p, h, 3);
            weighted_sum(e, &o, &w_niw)
        }),
        &x0,
        &head_g,
    );
    names.push(format!("niw heads {head_e:.1e}"));
    worst_component = worst_component.max(ode_e).max(gru_e).max(head_e);

    // End-to-end: H = 4, D = 2, one series with two observations. The KL
    // target is a constant, so the finite differences hold it at its base value.
    let cfg = small_config(2, 4);
    let model = EdictModel::new(cfg.clone(), 9).unwrap();
    let series = IrregularSeries {
        id: "tiny".into(),
        times: vec![0.13, 0.41],
        values: vec![vec![0.7, 0.0], vec![-0.4, 1.1]],
        masks: vec![vec![true, false], vec![true, true]],
        static_covariates: None,
        label: None,
    };
    let tc = TrainConfig {
        beta1: 1.0,
        beta2: 0.01,
        ..TrainConfig::default()
    };
    let (_, grads) = series_gradient(&model, &series, &tc).unwrap().unwrap();
    let analytic: Vec<f64> = grads.concat();
    let targets: Vec<NiwParams> = {
        let mut ev = Eval;
        let p = model.params.constants(&mut ev);
        let out = unroll_ops(&mut ev, &cfg, &p, &series, &[], false);
        out.steps
            .iter()
            .enumerate()
            .map(|(k, s)| conjugate_update(&s.niw_pre.read(&ev), &series.values[k], &series.masks[k]).unwrap())
            .collect()
    };
    let frozen_loss = |x: &[f64]| -> f64 {
        let mut m = model.params.clone();
        set_flat(&mut m, x);
        let mut ev = Eval;
        let p = m.constants(&mut ev);
        let out = unroll_ops(&mut ev, &cfg, &p, &series, &[], false);
        let mut total = 0.0;
        for (k, s) in out.steps.iter().enumerate() {
            let (x, mask) = (&series.values[k], &series.masks[k]);
            let nll = nll_ops(&mut ev, &s.niw_pre, x, mask, tc.nll_form).item();
            let reg = evidential_reg_ops(&mut ev, &s.niw_pre, x, mask).item();
            let kl = niw_kl_ops(&mut ev, &targets[k], &s.niw_post, mask).item();
            total += nll + tc.beta1 * kl + tc.beta2 * reg;
        }
        total / out.steps.len() as f64
    };
    let base = flat(&model.params);
    let consistent = (frozen_loss(&base) - series_loss(&model, &series, &tc).unwrap().unwrap().total).abs() < 1e-12;
    let e2e = fd_check(frozen_loss, &base, &analytic);
    names.push(format!("end-to-end {e2e:.1e}"));
    outcome(
        worst_component < 1e-4 && e2e < 1e-3 && consistent,
        format!("max rel err: {} (limits 1e-4, end-to-end 1e-3)", names.join(", ")),
    )
}

// ---------------------------------------------------------------- 2. formula oracles

fn oracle_boxed_nll(n: &NiwParams, x: &[f64], mask: &[bool]) -> f64 {
    let p = mask.iter().filter(|m| **m).count() as f64;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for d in 0..x.len() {
        if mask[d] {
            quad += (x[d] - n.mu0[d]).powi(2) / n.psi[d];
            logdet += n.psi[d].ln();
        }
    }
    -ln_gamma((n.nu + 1.0) / 2.0) + ln_gamma((n.nu - p + 1.0) / 2.0) + p / 2.0 * (std::f64::consts::PI / n.nu).ln()
        + 0.5 * logdet
        + (n.nu + 1.0) / 2.0 * (1.0 + n.lambda * quad).ln()
}

/// Log density of one Normal-Inverse-Gamma factor at (μ, σ²).
fn nig_log_density(mu: f64, s2: f64, m: f64, lambda: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * s2.ln() - b / s2 + 0.5 * lambda.ln()
        - 0.5 * (2.0 * std::f64::consts::PI * s2).ln()
        - lambda * (mu - m).powi(2) / (2.0 * s2)
}

fn mc_kl(p: &NiwParams, q: &NiwParams, mask: &[bool], samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut total = 0.0;
    for d in 0..mask.len() {
        if !mask[d] {
            continue;
        }
        let (ap, bp) = (p.nu / 2.0, p.psi[d] / 2.0);
        let (aq, bq) = (q.nu / 2.0, q.psi[d] / 2.0);
        let gamma = Gamma::new(ap, 1.0 / bp).unwrap();
        let mut acc = 0.0;
        for _ in 0..samples {
            let s2 = 1.0 / gamma.sample(&mut rng);
            let mu = p.mu0[d] + (s2 / p.lambda).sqrt() * std_normal.sample(&mut rng);
            acc += nig_log_density(mu, s2, p.mu0[d], p.lambda, ap, bp) - nig_log_density(mu, s2, q.mu0[d], q.lambda, aq, bq);
        }
        total += acc / samples as f64;
    }
    total
}

fn criterion_formulas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.random_range(1..5);
        let n = random_niw(&mut rng, d);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut mask: Vec<bool> = (0..d).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let df = d as f64;

        worst = worst.max((nll(&n, &x, &mask, NllForm::Boxed).unwrap() - oracle_boxed_nll(&n, &x, &mask)).abs());

        let t = predictive_t(&n).unwrap();
        worst = worst.max((t.dof - (n.nu - df + 1.0)).abs());
        for i in 0..d {
            let scale = (1.0 + n.lambda) / (n.lambda * (n.nu - df + 1.0)) * n.psi[i];
            worst = worst.max((t.scale_diag[i] - scale).abs()).max((t.loc[i] - n.mu0[i]).abs());
        }

        let u = uncertainty(&n).unwrap();
        for i in 0..d {
            let alea = n.psi[i] / (n.nu - df - 1.0);
            let epi = n.psi[i] / (n.lambda * (n.nu - df - 1.0));
            worst = worst.max((u.aleatoric[i] - alea).abs()).max((u.epistemic[i] - epi).abs());
        }

        let l1: f64 = (0..d).filter(|&i| mask[i]).map(|i| (n.mu0[i] - x[i]).abs()).sum();
        worst = worst.max((evidential_reg(&n, &x, &mask).unwrap() - l1 * (n.lambda + n.nu)).abs());

        let post = conjugate_update(&n, &x, &mask).unwrap();
        worst = worst.max((post.lambda - (n.lambda + 1.0)).abs()).max((post.nu - (n.nu + 1.0)).abs());
        for i in 0..d {
            let (mu, psi) = if mask[i] {
                (
                    (n.lambda * n.mu0[i] + x[i]) / (n.lambda + 1.0),
                    n.psi[i] + n.lambda / (n.lambda + 1.0) * (x[i] - n.mu0[i]).powi(2),
                )
            } else {
                (n.mu0[i], n.psi[i])
            };
            worst = worst.max((post.mu0[i] - mu).abs()).max((post.psi[i] - psi).abs());
        }
    }

    let cases = [
        (
            NiwParams { mu0: vec![0.0, 1.0], lambda: 2.0, psi: vec![1.0, 2.0], nu: 6.0 },
            NiwParams { mu0: vec![0.5, 0.0], lambda: 1.0, psi: vec![2.0, 1.0], nu: 4.0 },
            vec![true, true],
        ),
        (
            NiwParams { mu0: vec![1.0], lambda: 5.0, psi: vec![0.5], nu: 8.0 },
            NiwParams { mu0: vec![0.0], lambda: 2.0, psi: vec![1.5], nu: 5.0 },
            vec![true],
        ),
        (
            NiwParams { mu0: vec![0.3, -0.2, 0.1], lambda: 1.5, psi: vec![1.0, 1.0, 3.0], nu: 7.0 },
            NiwParams { mu0: vec![-0.5, 0.4, 0.0], lambda: 3.0, psi: vec![2.5, 0.5, 1.0], nu: 9.0 },
            vec![true, false, true],
        ),
        (
            NiwParams { mu0: vec![2.0, 0.0], lambda: 0.7, psi: vec![3.0, 0.8], nu: 5.0 },
            NiwParams { mu0: vec![0.0, 0.0], lambda: 1.2, psi: vec![1.0, 1.0], nu: 6.5 },
            vec![true, true],
        ),
        (
            NiwParams { mu0: vec![-1.0], lambda: 4.0, psi: vec![4.0], nu: 12.0 },
            NiwParams { mu0: vec![0.0], lambda: 1.0, psi: vec![1.0], nu: 4.0 },
            vec![true],
        ),
    ];
    let mut kl_worst: f64 = 0.0;
    for (i, (p, q, mask)) in cases.iter().enumerate() {
        let exact = niw_kl(p, q, mask).unwrap();
        let mc = mc_kl(p, q, mask, 1_000_000, 100 + i as u64);
        kl_worst = kl_worst.max((exact - mc).abs() / exact.abs());
    }
    outcome(
        worst < 1e-10 && kl_worst < 0.02,
        format!("max abs err vs oracles {worst:.1e} (limit 1e-10); KL vs 1e6-sample Monte Carlo max rel err {:.2}% (limit 2%)", 100.0 * kl_worst),
    )
}

// ---------------------------------------------------------------- 3. calibration metrics

fn criterion_calibration() -> Outcome {
    let levels = confidence_grid();
    let mut ok = levels.len() == 20 && (levels[0] - 0.05).abs() < 1e-12;
    let perfect = CoverageCurve {
        levels: levels.clone(),
        coverage: levels.clone(),
        width: vec![1.0; 20],
    };
    let e_perfect = ece(&perfect);
    ok &= e_perfect == 0.0;
    let zero = CoverageCurve {
        coverage: vec![0.0; 20],
        ..perfect.clone()
    };
    let one = CoverageCurve {
        coverage: vec![1.0; 20],
        ..perfect.clone()
    };
    let mean_level = levels.iter().sum::<f64>() / 20.0;
    ok &= (ece(&zero) - mean_level).abs() < 1e-12;
    ok &= (ece(&one) - (1.0 - mean_level)).abs() < 1e-12;
    let shifted = CoverageCurve {
        coverage: levels.iter().map(|l| l + 0.05).collect(),
        ..perfect.clone()
    };
    ok &= (ece(&shifted) - 0.05).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<TargetPrediction> = (0..2000)
        .map(|i| TargetPrediction {
            cell: edict::Cell {
                time: 0.5,
                feature: 0,
                value: rng.random_range(-3.0..3.0),
            },
            loc: 0.0,
            scale: 0.5 + (i % 7) as f64 * 0.2,
            dof: 3.0 + (i % 5) as f64,
        })
        .collect();
    let curve = coverage_from_predictions(&preds, &levels).unwrap();
    let monotone = curve.coverage.windows(2).all(|w| w[0] <= w[1]) && curve.width.windows(2).all(|w| w[0] <= w[1]);
    ok &= monotone;
    outcome(
        ok,
        format!(
            "grid of {} levels; perfect ECE {e_perfect}; degenerate curves {:.4}/{:.4} vs hand {mean_level:.4}/{:.4}; coverage and width monotone: {monotone}",
            levels.len(),
            ece(&zero),
            ece(&one),
            1.0 - mean_level
        ),
    )
}

// ---------------------------------------------------------------- 4 and 5. synthetic reproduction

fn criterion_synthetic(run: &SyntheticRun, seconds: f64) -> Outcome {
    let mse = run.extrapolation.mse;
    let e = run.extrapolation.ece;
    let acc = run.test_accuracy;
    let epochs = run.training.log.len();
    let hidden = run.training.model.config.hidden;
    outcome(
        mse <= 0.1 && e <= 0.20 && acc >= 0.97 && seconds < 1800.0 && epochs <= 40 && hidden == 50,
        format!(
            "extrapolation MSE {mse:.4} (≤ 0.1), extrapolation ECE {e:.4} (≤ 0.20), test accuracy {acc:.4} (≥ 0.97); {} samples, H = {hidden}, {epochs} epochs, {seconds:.0} s (< 1800 s)",
            run.data.train.len() + run.data.val.len() + run.data.test.len()
        ),
    )
}

fn criterion_edgr(run: &SyntheticRun) -> Outcome {
    let sweep = run.sweep.as_ref().expect("sweep enabled");
    let mut ok = true;
    let mut parts = Vec::new();
    for level in 6..=9 {
        let none = sweep.summary_for(level, PolicyKind::None).unwrap().accuracy_mean;
        let edgr = sweep.summary_for(level, PolicyKind::Edgr).unwrap().accuracy_mean;
        ok &= edgr - none >= 0.10;
        parts.push(format!("L{level} {edgr:.3} vs {none:.3}"));
    }
    let seeds = sweep.rows.iter().filter(|r| r.level == 9 && r.policy == PolicyKind::None).count();
    ok &= seeds == 3;

    let noisy = run.data.stats.apply_dataset(&inject_noise(&run.data.test_raw, 9, 1).unwrap());
    let identical = noisy.series.iter().all(|s| {
        let a = edgr_infer(&run.training.model, &run.classifier.head, s, &ReweightPolicy::none()).unwrap();
        let b = edgr_infer(&run.training.model, &run.classifier.head, s, &ReweightPolicy::edgr(1e9)).unwrap();
        a.scores.iter().zip(&b.scores).all(|(x, y)| x.to_bits() == y.to_bits()) && a.corrected == b.corrected
    });
    ok &= identical;
    outcome(
        ok,
        format!(
            "mean accuracy over {seeds} seeds, edgr vs none (margin ≥ 0.10): {}; η = 1e9 bitwise identical to none: {identical}",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6. protocol invariants

/// Writes every artifact of a small seeded pipeline into `dir` and returns
/// (name, sha256) pairs.
fn tiny_pipeline_hashes(dir: &Path) -> Vec<(String, String)> {
    let ds = generate_synthetic(60, 8).unwrap();
    let (tr, va, te) = split_stratified(&ds, [0.7, 0.1, 0.2], 8).unwrap();
    let (tr_n, others, stats) = znormalize(&tr, &[&va, &te]).unwrap();
    save_csv(&ds, &CsvPaths::in_dir(dir, "synthetic")).unwrap();
    let tc = TrainConfig {
        hidden: 6,
        encoder: 5,
        head_hidden: 4,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train_edict(&tr_n, &others[0], &tc).unwrap();
    Checkpoint::new(&out.model, Some(tc), Some(stats.clone()))
        .save(&dir.join("model.json"))
        .unwrap();
    let (i, x) = eval_protocol(&out.model, &others[1], HoldoutConfig::default(), 8).unwrap();
    write_report_json(&i, &dir.join("interp.json")).unwrap();
    write_report_json(&x, &dir.join("extrap.json")).unwrap();
    let cc = ClassifierConfig {
        epochs: 3,
        ..ClassifierConfig::default()
    };
    let c = train_classifier(&out.model, &tr_n, &others[0], &cc).unwrap();
    let policies = [ReweightPolicy::none(), ReweightPolicy::edgr(1.96)];
    let sweep = noise_sweep(&out.model, &c.head, &te, &policies, &[1], Some(&stats)).unwrap();
    write_sweep_csv(&sweep, &dir.join("sweep.csv")).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let h = sha256_file(&dir.join(&n)).unwrap();
            (n, h)
        })
        .collect()
}

fn criterion_protocol() -> Outcome {
    let ds = generate_synthetic(200, 31).unwrap();
    let (tr, _, _) = split_stratified(&ds, [0.7, 0.1, 0.2], 31).unwrap();
    let (tr, _, _) = znormalize(&tr, &[]).unwrap();
    let model = EdictModel::new(small_config(3, 8), 2).unwrap();

    // Causality: a query depends only on observations strictly before it.
    let mut causal = true;
    for s in tr.series.iter().take(20) {
        let q = s.times[s.len() / 2] + 1e-3;
        let full = model.unroll(s, &[q], false).unwrap();
        let cut = model.unroll(&s.truncate_before(q), &[q], false).unwrap();
        causal &= full.queries[0].1 == cut.queries[0].1;
    }

    // Masked-feature independence: values behind a false mask bit are ignored.
    let mut masked = true;
    for s in tr.series.iter().take(20) {
        let mut t = s.clone();
        for (vals, mask) in t.values.iter_mut().zip(&t.masks) {
            for (v, m) in vals.iter_mut().zip(mask) {
                if !m {
                    *v = 1e6;
                }
            }
        }
        let a = model.unroll(s, &[0.95], true).unwrap();
        let b = model.unroll(&t, &[0.95], true).unwrap();
        masked &= a.queries == b.queries && a.last == b.last;
    }

    // Hold-out partition.
    let split = holdout_observations(&tr, 0.1, 0.8, 5).unwrap();
    let mut partition = true;
    for (i, s) in tr.series.iter().enumerate() {
        let mut all: Vec<_> = s.cells().map(|c| (c.time.to_bits(), c.feature, c.value.to_bits())).collect();
        let kept: Vec<_> = split.training.series[i].cells().collect();
        let interp = &split.interpolation[i];
        let extrap = &split.extrapolation[i];
        let before = all.iter().filter(|c| f64::from_bits(c.0) < 0.8).count();
        partition &= interp.len() == (0.1 * before as f64).floor() as usize;
        partition &= interp.iter().all(|c| c.time < 0.8) && extrap.iter().all(|c| c.time >= 0.8);
        partition &= kept.iter().all(|c| c.time < 0.8);
        let mut union: Vec<_> = kept
            .iter()
            .chain(interp)
            .chain(extrap)
            .map(|c| (c.time.to_bits(), c.feature, c.value.to_bits()))
            .collect();
        all.sort();
        union.sort();
        partition &= all == union;
    }

    // Stratification within ±1 sample of 70/10/20 per class and overall.
    let full = generate_synthetic(2000, 4).unwrap();
    let (a, b, c) = split_stratified(&full, [0.7, 0.1, 0.2], 4).unwrap();
    let mut strat = true;
    for class in 0..2 {
        let count = |d: &Dataset| d.series.iter().filter(|s| s.label == Some(class)).count() as f64;
        let n = count(&full);
        strat &= (count(&a) - 0.7 * n).abs() <= 1.0 && (count(&b) - 0.1 * n).abs() <= 1.0 && (count(&c) - 0.2 * n).abs() <= 1.0;
    }
    strat &= (a.len() as f64 - 1400.0).abs() <= 1.0 && (b.len() as f64 - 200.0).abs() <= 1.0 && (c.len() as f64 - 400.0).abs() <= 1.0;

    // Determinism: two runs of a seeded pipeline write byte-identical artifacts.
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let h1 = tiny_pipeline_hashes(d1.path());
    let h2 = tiny_pipeline_hashes(d2.path());
    let deterministic = h1 == h2 && h1.len() >= 6;

    outcome(
        causal && masked && partition && strat && deterministic,
        format!(
            "causality {causal}, masked-feature independence {masked}, hold-out partition {partition}, stratification {strat}, identical hashes over {} artifacts {deterministic}",
            h1.len()
        ),
    )
}

// ---------------------------------------------------------------- 7. demo variance contraction

fn criterion_demo() -> Outcome {
    let ds = generate_demo2d(300, 12).unwrap();
    let (tr, others, _) = znormalize(&ds.subset(&(0..250).collect::<Vec<_>>()), &[&ds.subset(&(250..300).collect::<Vec<_>>())]).unwrap();
    let tc = TrainConfig {
        hidden: 16,
        epochs: 5,
        batch_size: 10,
        learning_rate: 1e-2,
        seed: 12,
        ..TrainConfig::default()
    };
    let out = train_edict(&tr, &others[0], &tc).unwrap();
    let (mut pre, mut post, mut events, mut contracted) = (0.0, 0.0, 0usize, 0usize);
    for s in &others[0].series {
        let traj = out.model.unroll(s, &[], false).unwrap();
        for (k, e) in traj.entries.iter().enumerate() {
            let target = conjugate_update(&e.niw_pre, &s.values[k], &s.masks[k]).unwrap();
            let vp: f64 = predictive_variance(&e.niw_pre).unwrap().iter().sum::<f64>() / 2.0;
            let vt: f64 = predictive_variance(&target).unwrap().iter().sum::<f64>() / 2.0;
            pre += vp;
            post += vt;
            events += 1;
            contracted += (vt < vp) as usize;
        }
    }
    let (pre, post) = (pre / events as f64, post / events as f64);
    outcome(
        events > 0 && pre > post,
        format!(
            "mean predictive variance before updates {pre:.4} > after conjugate targets {post:.4} over {events} update events ({contracted} contracted individually)"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    let mut line = |id: usize, name: &str, o: Outcome| {
        println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    };
    let t = Instant::now();
    line(1, "gradient suite", criterion_gradients());
    let g = t.elapsed().as_secs_f64();
    println!("      (gradient suite {g:.1} s)");
    let t = Instant::now();
    line(2, "formula oracles", criterion_formulas());
    println!("      (formula oracles {:.1} s)", t.elapsed().as_secs_f64());
    line(3, "calibration metrics", criterion_calibration());

    let t = Instant::now();
    let run = run_synthetic(&SyntheticConfig::default(), |e| {
        eprintln!(
            "      epoch {:>2}: total {:.4}, validation interpolation MSE {:.4}",
            e.epoch,
            e.total,
            e.val_interp_mse.unwrap_or(f64::NAN)
        )
    })
    .unwrap();
    let seconds = t.elapsed().as_secs_f64();
    line(4, "synthetic reproduction", criterion_synthetic(&run, seconds));
    line(5, "EDGR robustness", criterion_edgr(&run));
    line(6, "protocol invariants", criterion_protocol());
    line(7, "demo variance contraction", criterion_demo());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
