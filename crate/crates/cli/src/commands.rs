//! One function per subcommand. Each plans its outputs, does the work in a
//! staging directory and commits with a manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use edict::data::{generate_demo2d, generate_synthetic, load_csv, save_csv, split_dataset, znormalize, CsvPaths};
use edict::edgr::{classify_dataset, score_dataset, write_sweep_csv, write_sweep_json, EdgrOutput};
use edict::evaluation::{accuracy, eval_protocol, write_curve_csv, write_report_json};
use edict::pipeline::{render_tables, run_synthetic, sweep_policies, SyntheticRun};
use edict::training::{params_checksum, train_edict_from, EpochLog};
use edict::{
    CalibrationReport, Checkpoint, ClassifierCheckpoint, ClassifierHead, Dataset, EdictModel, Manifest, NormStats,
    PolicyKind, ReweightPolicy,
};
use serde::Serialize;

use crate::config::{DatasetKind, RunConfig};
use crate::output::Staging;

pub struct Context {
    pub out: PathBuf,
    pub overwrite: bool,
}

const CHECKPOINT: &str = "checkpoint.json";
const LOSS_LOG: &str = "loss_log.json";
const CLASSIFIER: &str = "classifier.json";
const CLASSIFIER_LOG: &str = "classifier_log.json";
const CLASSIFIER_METRICS: &str = "classifier_metrics.json";
const SPLITS: [&str; 3] = ["train", "val", "test"];

fn csv_names(stem: &str) -> Vec<String> {
    vec![
        format!("{stem}_observations.csv"),
        format!("{stem}_labels.csv"),
        format!("{stem}_meta.json"),
    ]
}

fn split_names() -> Vec<String> {
    SPLITS.iter().flat_map(|s| csv_names(s)).collect()
}

fn calibration_names() -> Vec<String> {
    ["interpolation", "extrapolation"]
        .iter()
        .flat_map(|m| [format!("calibration_{m}.json"), format!("coverage_{m}.csv")])
        .collect()
}

fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

fn plan(ctx: &Context, command: &str, mut files: Vec<String>) -> Result<Staging> {
    files.push(manifest_name(command));
    Staging::new(&ctx.out, ctx.overwrite, &files)
}

fn manifest(command: &str, cfg: &RunConfig) -> Result<Manifest> {
    Ok(Manifest::new(command, cfg.seed, serde_json::to_value(cfg)?))
}

fn save_dataset(stage: &mut Staging, ds: &Dataset, stem: &str) -> Result<()> {
    let names = csv_names(stem);
    let paths = CsvPaths {
        observations: stage.path(&names[0]),
        labels: Some(stage.path(&names[1])),
        covariates: None,
        meta: Some(stage.path(&names[2])),
    };
    save_csv(ds, &paths).with_context(|| format!("writing dataset `{stem}`"))
}

fn load_dataset(dir: &Path, stem: &str) -> Result<Dataset> {
    let paths = CsvPaths::in_dir(dir, stem);
    ensure!(
        paths.observations.exists(),
        "no dataset `{stem}` in {} (expected {})",
        dir.display(),
        paths.observations.display()
    );
    load_csv(&paths).with_context(|| format!("reading dataset `{stem}` from {}", dir.display()))
}

fn log_epoch(e: &EpochLog) {
    let val = e.val_interp_mse.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  loss {:.4}  nll {:.4}  kl {:.4}  reg {:.4}  val mse {val}",
        e.epoch, e.total, e.nll, e.kl, e.reg
    );
}

/// A trained run: model, its normalization and the raw splits it was fitted on.
struct Run {
    model: EdictModel,
    stats: NormStats,
    dir: PathBuf,
}

impl Run {
    fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT);
        ensure!(path.exists(), "no {CHECKPOINT} in {} (run `edict train` first)", dir.display());
        let ck = Checkpoint::load(&path).with_context(|| format!("reading {}", path.display()))?;
        let stats = ck
            .normalization
            .clone()
            .with_context(|| format!("{} carries no normalization statistics", path.display()))?;
        let model = ck.model()?;
        Ok(Self {
            model,
            stats,
            dir: dir.to_path_buf(),
        })
    }

    fn raw(&self, split: &str) -> Result<Dataset> {
        load_dataset(&self.dir, split)
    }

    fn normalized(&self, split: &str) -> Result<Dataset> {
        Ok(self.stats.apply_dataset(&self.raw(split)?))
    }

    fn classifier(&self) -> Result<ClassifierHead> {
        let path = self.dir.join(CLASSIFIER);
        ensure!(path.exists(), "no {CLASSIFIER} in {} (run `edict train-classifier` first)", self.dir.display());
        let ck = ClassifierCheckpoint::load(&path).with_context(|| format!("reading {}", path.display()))?;
        let current = params_checksum(&self.model.params);
        ensure!(
            ck.encoder_checksum == current,
            "{} was trained on a different model than {}",
            path.display(),
            self.dir.join(CHECKPOINT).display()
        );
        Ok(ck.head()?)
    }
}

pub fn generate(ctx: &Context, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let stem = cfg.data.dataset.stem();
    let mut stage = plan(ctx, "generate", csv_names(stem))?;
    let ds = match cfg.data.dataset {
        DatasetKind::Synthetic => generate_synthetic(cfg.data.samples, cfg.seed)?,
        DatasetKind::Demo2d => generate_demo2d(cfg.data.samples, cfg.seed)?,
    };
    save_dataset(&mut stage, &ds, stem)?;
    stage.commit(manifest("generate", cfg)?)
}

pub fn train(ctx: &Context, cfg: &RunConfig, data: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let mut files = vec![CHECKPOINT.to_string(), LOSS_LOG.to_string()];
    files.extend(split_names());
    let mut stage = plan(ctx, "train", files)?;
    let ds = load_dataset(data, stem)?;
    let (train_raw, val_raw, test_raw) = split_dataset(&ds, cfg.data.split, cfg.seed)?;
    let (train, others, stats) = znormalize(&train_raw, &[&val_raw])?;
    let covariates = train
        .series
        .first()
        .and_then(|s| s.static_covariates.as_ref())
        .map_or(0, Vec::len);
    let model = EdictModel::new(cfg.train.model_config(train.features, covariates), cfg.train.seed)?;
    let out = train_edict_from(model, &train, &others[0], &cfg.train, log_epoch)?;
    eprintln!("kept epoch {}", out.best_epoch);
    Checkpoint::new(&out.model, Some(cfg.train.clone()), Some(stats)).save(&stage.path(CHECKPOINT))?;
    stage.write_json(LOSS_LOG, &out.log)?;
    for (split, ds) in SPLITS.iter().zip([&train_raw, &val_raw, &test_raw]) {
        save_dataset(&mut stage, ds, split)?;
    }
    stage.commit(manifest("train", cfg)?)
}

fn write_calibration(stage: &mut Staging, reports: [&CalibrationReport; 2]) -> Result<()> {
    for (name, r) in ["interpolation", "extrapolation"].iter().zip(reports) {
        write_report_json(r, &stage.path(&format!("calibration_{name}.json")))?;
        write_curve_csv(&r.curve, &stage.path(&format!("coverage_{name}.csv")))?;
        eprintln!("{name}: mse {:.4} ± {:.4}  ece {:.4}  targets {}", r.mse, r.mse_std, r.ece, r.targets);
    }
    Ok(())
}

pub fn eval_calibration(ctx: &Context, cfg: &RunConfig, run: &Path) -> Result<Vec<PathBuf>> {
    let mut stage = plan(ctx, "eval-calibration", calibration_names())?;
    let run = Run::load(run)?;
    let test = run.normalized("test")?;
    let (interp, extrap) = eval_protocol(&run.model, &test, cfg.holdout, cfg.seed)?;
    write_calibration(&mut stage, [&interp, &extrap])?;
    stage.commit(manifest("eval-calibration", cfg)?)
}

#[derive(Debug, Serialize)]
struct ClassifierMetrics {
    best_epoch: usize,
    test_accuracy: f64,
    test_auroc: Option<f64>,
    encoder_checksum: String,
}

pub fn train_classifier(ctx: &Context, cfg: &RunConfig, run: &Path) -> Result<Vec<PathBuf>> {
    let files = [CLASSIFIER, CLASSIFIER_LOG, CLASSIFIER_METRICS].map(String::from).to_vec();
    let mut stage = plan(ctx, "train-classifier", files)?;
    let run = Run::load(run)?;
    let train = run.normalized("train")?;
    ensure!(train.is_labeled(), "the training split has no labels; a classifier needs a labeled dataset");
    let val = run.normalized("val")?;
    let test = run.normalized("test")?;
    let out = edict::training::train_classifier(&run.model, &train, &val, &cfg.classifier)?;
    let (test_accuracy, test_auroc) = score_dataset(&run.model, &out.head, &test, &ReweightPolicy::none())?;
    eprintln!("kept epoch {}  test accuracy {test_accuracy:.4}", out.best_epoch);
    ClassifierCheckpoint::new(&out.head, cfg.classifier.clone(), out.encoder_checksum.clone())
        .save(&stage.path(CLASSIFIER))?;
    stage.write_json(CLASSIFIER_LOG, &out.log)?;
    stage.write_json(
        CLASSIFIER_METRICS,
        &ClassifierMetrics {
            best_epoch: out.best_epoch,
            test_accuracy,
            test_auroc,
            encoder_checksum: out.encoder_checksum,
        },
    )?;
    stage.commit(manifest("train-classifier", cfg)?)
}

/// Configured policies; the population baseline uses statistics of the
/// normalized training split.
fn policies(cfg: &RunConfig, train: &Dataset) -> Result<Vec<ReweightPolicy>> {
    let all = sweep_policies(train, cfg.edgr.eta)?;
    cfg.edgr
        .policies
        .iter()
        .map(|k| {
            all.iter()
                .find(|p| p.kind == *k)
                .cloned()
                .with_context(|| format!("unknown policy `{}`", k.name()))
        })
        .collect()
}

pub fn noise_sweep(ctx: &Context, cfg: &RunConfig, run: &Path) -> Result<Vec<PathBuf>> {
    let files = vec!["noise_sweep.csv".to_string(), "noise_sweep.json".to_string()];
    let mut stage = plan(ctx, "noise-sweep", files)?;
    let run = Run::load(run)?;
    let head = run.classifier()?;
    let train = run.normalized("train")?;
    let test_raw = run.raw("test")?;
    let policies = policies(cfg, &train)?;
    let result = edict::edgr::noise_sweep(&run.model, &head, &test_raw, &policies, &cfg.edgr.sweep_seeds, Some(&run.stats))?;
    for s in &result.summary {
        eprintln!("level {}  {:<16} accuracy {:.4} ± {:.4}", s.level, s.policy.name(), s.accuracy_mean, s.accuracy_std);
    }
    write_sweep_csv(&result, &stage.path("noise_sweep.csv"))?;
    write_sweep_json(&result, &stage.path("noise_sweep.json"))?;
    stage.commit(manifest("noise-sweep", cfg)?)
}

#[derive(Debug, Serialize)]
struct InferenceRecord {
    id: String,
    predicted: usize,
    label: Option<usize>,
    scores: Vec<f64>,
    clipped: usize,
}

#[derive(Debug, Serialize)]
struct Inference {
    policy: PolicyKind,
    eta: f64,
    accuracy: Option<f64>,
    series: Vec<InferenceRecord>,
}

pub fn infer(ctx: &Context, cfg: &RunConfig, run: &Path, data: &Path, stem: &str, kind: PolicyKind) -> Result<Vec<PathBuf>> {
    let mut stage = plan(ctx, "infer", vec!["inference.json".to_string()])?;
    let run = Run::load(run)?;
    let head = run.classifier()?;
    let policy = match kind {
        PolicyKind::PopulationMean => sweep_policies(&run.normalized("train")?, cfg.edgr.eta)?
            .into_iter()
            .find(|p| p.kind == kind)
            .context("population policy missing")?,
        PolicyKind::Edgr => ReweightPolicy::edgr(cfg.edgr.eta),
        PolicyKind::None => ReweightPolicy {
            eta: cfg.edgr.eta,
            ..ReweightPolicy::none()
        },
    };
    let ds = run.stats.apply_dataset(&load_dataset(data, stem)?);
    if ds.features != run.model.features() {
        bail!(
            "dataset `{stem}` has {} features but the model expects {}",
            ds.features,
            run.model.features()
        );
    }
    let outs = classify_dataset(&run.model, &head, &ds, &policy)?;
    let accuracy = match ds.labels() {
        Some(labels) => {
            let preds: Vec<usize> = outs.iter().map(EdgrOutput::predicted).collect();
            Some(accuracy(&preds, &labels)?)
        }
        None => None,
    };
    let series = ds
        .series
        .iter()
        .zip(outs)
        .map(|(s, o)| InferenceRecord {
            id: s.id.clone(),
            predicted: o.predicted(),
            label: s.label,
            clipped: o.clipped,
            scores: o.scores,
        })
        .collect();
    if let Some(a) = accuracy {
        eprintln!("accuracy {a:.4}");
    }
    stage.write_json(
        "inference.json",
        &Inference {
            policy: kind,
            eta: policy.eta,
            accuracy,
            series,
        },
    )?;
    stage.commit(manifest("infer", cfg)?)
}

pub fn reproduce_synthetic(ctx: &Context, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure!(
        cfg.data.dataset == DatasetKind::Synthetic,
        "reproduce-synthetic needs `data.dataset` = \"synthetic\", got \"{}\"",
        cfg.data.dataset.stem()
    );
    let mut files: Vec<String> = [CHECKPOINT, LOSS_LOG, CLASSIFIER, CLASSIFIER_LOG, CLASSIFIER_METRICS]
        .map(String::from)
        .to_vec();
    files.extend(split_names());
    files.extend(calibration_names());
    files.extend(["noise_sweep.csv", "noise_sweep.json", "summary.json", "tables.md"].map(String::from));
    let mut stage = plan(ctx, "reproduce-synthetic", files)?;
    let run: SyntheticRun = run_synthetic(&cfg.synthetic(), log_epoch)?;
    let d = &run.data;
    Checkpoint::new(&run.training.model, Some(cfg.train.clone()), Some(d.stats.clone())).save(&stage.path(CHECKPOINT))?;
    stage.write_json(LOSS_LOG, &run.training.log)?;
    for (split, ds) in SPLITS.iter().zip([&d.train_raw, &d.val_raw, &d.test_raw]) {
        save_dataset(&mut stage, ds, split)?;
    }
    write_calibration(&mut stage, [&run.interpolation, &run.extrapolation])?;
    let c = &run.classifier;
    ClassifierCheckpoint::new(&c.head, cfg.classifier.clone(), c.encoder_checksum.clone()).save(&stage.path(CLASSIFIER))?;
    stage.write_json(CLASSIFIER_LOG, &c.log)?;
    stage.write_json(
        CLASSIFIER_METRICS,
        &ClassifierMetrics {
            best_epoch: c.best_epoch,
            test_accuracy: run.test_accuracy,
            test_auroc: run.test_auroc,
            encoder_checksum: c.encoder_checksum.clone(),
        },
    )?;
    if let Some(sweep) = &run.sweep {
        write_sweep_csv(sweep, &stage.path("noise_sweep.csv"))?;
        write_sweep_json(sweep, &stage.path("noise_sweep.json"))?;
    }
    let summary = run.summary();
    stage.write_json("summary.json", &summary)?;
    let tables = render_tables(&summary, run.sweep.as_ref());
    eprint!("{tables}");
    stage.write_text("tables.md", &tables)?;
    stage.commit(manifest("reproduce-synthetic", cfg)?)
}
