//! Irregular series, synthetic generators, CSV ingestion and the dataset
//! transforms used by the experiments (splitting, normalization, hold-out,
//! noise injection).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("count must be at least 1, got {0}")]
    EmptyCount(usize),
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("series {series}: conflicting values for feature {feature} at time {time}")]
    ConflictingValue {
        series: String,
        feature: usize,
        time: f64,
    },
    #[error("series {series}: timestamps decrease ({prev} then {next})")]
    NonMonotoneTime { series: String, prev: f64, next: f64 },
    #[error("dataset has no labels")]
    Unlabeled,
    #[error("invalid split ratios {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("feature {feature} observed {count} times in the training set; need at least 2")]
    UnderObservedFeature { feature: usize, count: usize },
    #[error("t_cut must lie in (0, 1], got {0}")]
    InvalidCut(f64),
    #[error("hold-out fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("noise level must lie in 0..=9, got {0}")]
    InvalidNoiseLevel(u32),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature count mismatch: expected {expected}, found {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One multivariate irregular time series.
///
/// `values[k][d]` is meaningful only where `masks[k][d]` is set; unobserved
/// cells hold 0.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrregularSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub static_covariates: Option<Vec<f64>>,
    pub label: Option<usize>,
}

impl IrregularSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observation_count(&self) -> usize {
        self.masks.iter().flatten().filter(|m| **m).count()
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.times.iter().enumerate().flat_map(move |(k, &time)| {
            self.masks[k]
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(move |(feature, _)| Cell {
                    time,
                    feature,
                    value: self.values[k][feature],
                })
        })
    }

    /// Rebuilds a series from observed cells, grouping by time.
    pub fn from_cells(template: &IrregularSeries, features: usize, cells: &[Cell]) -> Self {
        let mut sorted: Vec<&Cell> = cells.iter().collect();
        sorted.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.feature.cmp(&b.feature)));
        let mut out = IrregularSeries {
            id: template.id.clone(),
            times: Vec::new(),
            values: Vec::new(),
            masks: Vec::new(),
            static_covariates: template.static_covariates.clone(),
            label: template.label,
        };
        for c in sorted {
            if out.times.last() != Some(&c.time) {
                out.times.push(c.time);
                out.values.push(vec![0.0; features]);
                out.masks.push(vec![false; features]);
            }
            let k = out.times.len() - 1;
            out.values[k][c.feature] = c.value;
            out.masks[k][c.feature] = true;
        }
        out
    }

    /// Keeps only times strictly before `t`.
    pub fn truncate_before(&self, t: f64) -> Self {
        let n = self.times.partition_point(|&x| x < t);
        IrregularSeries {
            times: self.times[..n].to_vec(),
            values: self.values[..n].to_vec(),
            masks: self.masks[..n].to_vec(),
            ..self.clone()
        }
    }
}

/// One observed (time, feature, value) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub time: f64,
    pub feature: usize,
    pub value: f64,
}

/// Per-feature mean and standard deviation over observed training cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn apply(&self, v: f64, feature: usize) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn invert(&self, v: f64, feature: usize) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.map_values(|v, d| self.apply(v, d));
        out.normalization = Some(self.clone());
        out
    }

    pub fn invert_dataset(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.map_values(|v, d| self.invert(v, d));
        out.normalization = None;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub series: Vec<IrregularSeries>,
    pub features: usize,
    pub classes: usize,
    /// Statistics the values were normalized with, if any.
    pub normalization: Option<NormStats>,
    /// Original (min, max) time range before min-max normalization.
    pub time_range: Option<(f64, f64)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.series.is_empty() && self.series.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.series.iter().map(|s| s.label).collect()
    }

    /// Applies `f(value, feature)` to every observed cell.
    pub fn map_values(&self, f: impl Fn(f64, usize) -> f64) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.series {
            for (vals, mask) in s.values.iter_mut().zip(&s.masks) {
                for (d, (v, m)) in vals.iter_mut().zip(mask).enumerate() {
                    if *m {
                        *v = f(*v, d);
                    }
                }
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            series: indices.iter().map(|&i| self.series[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            series: Vec::new(),
            features: self.features,
            classes: self.classes,
            normalization: self.normalization.clone(),
            time_range: self.time_range,
        }
    }

    pub fn with_series(&self, series: Vec<IrregularSeries>) -> Dataset {
        Dataset {
            series,
            ..self.clone_meta()
        }
    }
}

/// Independent, reproducible random stream for item `stream` of a seeded job.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const GRID_POINTS: usize = 100;
pub const SYNTHETIC_AMPLITUDE: f64 = 0.5;
pub const DISTRACTOR_JITTER: f64 = 0.1;
pub const INITIAL_WINDOW: f64 = 0.1;
/// Largest fraction of (time, feature) cells left observed.
pub const KEEP_FRACTION: f64 = 0.25;

pub fn grid_times() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|j| j as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

/// Fully observed latent signals of one synthetic series, `signals[d][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSeries {
    pub times: Vec<f64>,
    pub signals: Vec<Vec<f64>>,
    pub label: usize,
}

fn periodic(t: f64, mean: f64, freq: f64, phase: f64) -> f64 {
    mean + SYNTHETIC_AMPLITUDE * (2.0 * PI * freq * t + phase).sin()
}

fn synthetic_dense_one(rng: &mut ChaCha8Rng, label: usize) -> DenseSeries {
    let times = grid_times();
    let (m1, m2) = if label == 0 { (1.0, -1.0) } else { (-1.0, 1.0) };
    let mut latent = Vec::with_capacity(2);
    for mean in [m1, m2] {
        let freq = rng.random_range(1.0..3.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        latent.push(times.iter().map(|&t| periodic(t, mean, freq, phase)).collect::<Vec<_>>());
    }
    let jitter = Normal::new(0.0, DISTRACTOR_JITTER).expect("valid sigma");
    // The distractor follows whichever of the first two features is uninformative.
    let source = if label == 0 { 1 } else { 0 };
    let distractor = latent[source].iter().map(|v| v + jitter.sample(rng)).collect();
    latent.push(distractor);
    DenseSeries {
        times,
        signals: latent,
        label,
    }
}

/// Masks a dense grid down to `KEEP_FRACTION` of its cells, keeping at
/// least one cell inside the initial window.
fn sparsify(rng: &mut ChaCha8Rng, id: String, times: &[f64], signals: &[Vec<f64>], label: Option<usize>) -> IrregularSeries {
    let d = signals.len();
    let n_cells = times.len() * d;
    let keep = ((KEEP_FRACTION * n_cells as f64).floor() as usize).max(1);
    let window: Vec<usize> = (0..n_cells).filter(|c| times[c / d] < INITIAL_WINDOW).collect();
    let first = window[rng.random_range(0..window.len())];
    let rest: Vec<usize> = (0..n_cells).filter(|&c| c != first).collect();
    let mut chosen: Vec<usize> = index::sample(rng, rest.len(), keep - 1)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    chosen.push(first);
    chosen.sort_unstable();

    let cells: Vec<Cell> = chosen
        .iter()
        .map(|&c| Cell {
            time: times[c / d],
            feature: c % d,
            value: signals[c % d][c / d],
        })
        .collect();
    let template = IrregularSeries {
        id,
        times: vec![],
        values: vec![],
        masks: vec![],
        static_covariates: None,
        label,
    };
    IrregularSeries::from_cells(&template, d, &cells)
}

/// Dense latents behind [`generate_synthetic`], drawn from the same streams.
pub fn generate_synthetic_dense(n: usize, seed: u64) -> Result<Vec<DenseSeries>, DataError> {
    if n < 1 {
        return Err(DataError::EmptyCount(n));
    }
    Ok((0..n)
        .map(|i| synthetic_dense_one(&mut stream_rng(seed, i as u64), i % 2))
        .collect())
}

/// Three periodic features; the label decides which of the first two has mean +1.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < 1 {
        return Err(DataError::EmptyCount(n));
    }
    let series = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let dense = synthetic_dense_one(&mut rng, i % 2);
            sparsify(&mut rng, format!("syn{i:05}"), &dense.times, &dense.signals, Some(dense.label))
        })
        .collect();
    Ok(Dataset {
        series,
        features: 3,
        classes: 2,
        normalization: None,
        time_range: Some((0.0, 1.0)),
    })
}

/// Two anti-correlated decaying sinusoids, `x2 = −x1`, unlabeled.
pub fn generate_demo2d(n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < 1 {
        return Err(DataError::EmptyCount(n));
    }
    let times = grid_times();
    let series = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let freq = rng.random_range(1.0..3.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let x1: Vec<f64> = times
                .iter()
                .map(|&t| (-t).exp() * (2.0 * PI * freq * t + phase).sin())
                .collect();
            let x2 = x1.iter().map(|v| -v).collect();
            sparsify(&mut rng, format!("demo{i:05}"), &times, &[x1, x2], None)
        })
        .collect();
    Ok(Dataset {
        series,
        features: 2,
        classes: 0,
        normalization: None,
        time_range: Some((0.0, 1.0)),
    })
}

/// Paths of the long-format CSV representation of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvPaths {
    pub observations: PathBuf,
    pub labels: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// JSON sidecar with feature count, time range and normalization stats.
    pub meta: Option<PathBuf>,
}

impl CsvPaths {
    /// Conventional file names inside `dir`.
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            observations: dir.join(format!("{stem}_observations.csv")),
            labels: Some(dir.join(format!("{stem}_labels.csv"))),
            covariates: None,
            meta: Some(dir.join(format!("{stem}_meta.json"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub features: usize,
    pub classes: usize,
    pub time_range: Option<(f64, f64)>,
    pub normalization: Option<NormStats>,
}

pub fn save_csv(ds: &Dataset, paths: &CsvPaths) -> Result<(), DataError> {
    let (t0, t1) = ds.time_range.unwrap_or((0.0, 1.0));
    let mut w = csv::Writer::from_path(&paths.observations)?;
    w.write_record(["series_id", "time", "feature_index", "value"])?;
    for s in &ds.series {
        for c in s.cells() {
            let t = t0 + c.time * (t1 - t0);
            w.write_record([s.id.clone(), t.to_string(), c.feature.to_string(), c.value.to_string()])?;
        }
    }
    w.flush()?;

    if let Some(p) = &paths.labels {
        if ds.is_labeled() {
            let mut w = csv::Writer::from_path(p)?;
            w.write_record(["series_id", "label"])?;
            for s in &ds.series {
                w.write_record([s.id.clone(), s.label.expect("labeled").to_string()])?;
            }
            w.flush()?;
        }
    }
    if let Some(p) = &paths.covariates {
        let width = ds
            .series
            .iter()
            .filter_map(|s| s.static_covariates.as_ref().map(|c| c.len()))
            .max();
        if let Some(width) = width {
            let mut w = csv::Writer::from_path(p)?;
            let mut header = vec!["series_id".to_string()];
            header.extend((0..width).map(|i| format!("c{i}")));
            w.write_record(&header)?;
            for s in &ds.series {
                if let Some(c) = &s.static_covariates {
                    let mut row = vec![s.id.clone()];
                    row.extend(c.iter().map(|v| v.to_string()));
                    w.write_record(&row)?;
                }
            }
            w.flush()?;
        }
    }
    if let Some(p) = &paths.meta {
        let meta = DatasetMeta {
            features: ds.features,
            classes: ds.classes,
            time_range: ds.time_range,
            normalization: ds.normalization.clone(),
        };
        fs::write(p, serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64, DataError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| malformed(path, line, format!("{field} `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(path, line, format!("{field} is not finite")));
    }
    Ok(v)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<(), DataError> {
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().map(|h| h.trim()).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(malformed(path, 1, format!("expected header {}", expected.join(","))));
    }
    Ok(())
}

/// Reads the long CSV format. Times are min-max normalized to [0, 1]; when a
/// sidecar records the original range, that range is used instead of the
/// observed one.
pub fn load_csv(paths: &CsvPaths) -> Result<Dataset, DataError> {
    let meta: Option<DatasetMeta> = match &paths.meta {
        Some(p) if p.exists() => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        _ => None,
    };

    struct Raw {
        id: String,
        rows: Vec<(f64, usize, f64)>,
    }
    let obs_path = paths.observations.as_path();
    let mut rdr = csv::Reader::from_path(obs_path)?;
    check_header(obs_path, &mut rdr, &["series_id", "time", "feature_index", "value"])?;
    let mut order: Vec<Raw> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut max_feature = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != 4 {
            return Err(malformed(obs_path, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let id = rec[0].trim().to_string();
        let time = parse_f64(obs_path, line, "time", &rec[1])?;
        let feature: usize = rec[2]
            .trim()
            .parse()
            .map_err(|_| malformed(obs_path, line, format!("feature_index `{}` is not an index", &rec[2])))?;
        let value = parse_f64(obs_path, line, "value", &rec[3])?;
        if let Some(m) = &meta {
            if feature >= m.features {
                return Err(malformed(
                    obs_path,
                    line,
                    format!("feature_index {feature} out of range for {} features", m.features),
                ));
            }
        }
        max_feature = max_feature.max(feature);
        let slot = *lookup.entry(id.clone()).or_insert_with(|| {
            order.push(Raw { id, rows: Vec::new() });
            order.len() - 1
        });
        order[slot].rows.push((time, feature, value));
    }
    let features = meta.as_ref().map(|m| m.features).unwrap_or(max_feature + 1);

    let all_times = order.iter().flat_map(|r| r.rows.iter().map(|x| x.0));
    let (t0, t1) = match meta.as_ref().and_then(|m| m.time_range) {
        Some(range) => range,
        None => {
            let (lo, hi) = all_times.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
            if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) }
        }
    };
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };

    let mut series = Vec::with_capacity(order.len());
    for raw in order {
        let mut s = IrregularSeries {
            id: raw.id.clone(),
            times: vec![],
            values: vec![],
            masks: vec![],
            static_covariates: None,
            label: None,
        };
        let mut prev_raw = f64::NEG_INFINITY;
        for (t_raw, feature, value) in raw.rows {
            if t_raw < prev_raw {
                return Err(DataError::NonMonotoneTime {
                    series: raw.id,
                    prev: prev_raw,
                    next: t_raw,
                });
            }
            let t = (t_raw - t0) / span;
            if t_raw > prev_raw {
                s.times.push(t);
                s.values.push(vec![0.0; features]);
                s.masks.push(vec![false; features]);
            }
            prev_raw = t_raw;
            let k = s.times.len() - 1;
            if s.masks[k][feature] && s.values[k][feature] != value {
                return Err(DataError::ConflictingValue {
                    series: raw.id,
                    feature,
                    time: t_raw,
                });
            }
            s.masks[k][feature] = true;
            s.values[k][feature] = value;
        }
        series.push(s);
    }

    let index: HashMap<String, usize> = series.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
    let mut classes = meta.as_ref().map(|m| m.classes).unwrap_or(0);
    if let Some(p) = paths.labels.as_deref().filter(|p| p.exists()) {
        let mut rdr = csv::Reader::from_path(p)?;
        check_header(p, &mut rdr, &["series_id", "label"])?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != 2 {
                return Err(malformed(p, line, "expected 2 fields"));
            }
            let label: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| malformed(p, line, format!("label `{}` is not a class index", &rec[1])))?;
            let Some(&k) = index.get(rec[0].trim()) else {
                return Err(malformed(p, line, format!("unknown series `{}`", &rec[0])));
            };
            series[k].label = Some(label);
            classes = classes.max(label + 1);
        }
    }
    if let Some(p) = paths.covariates.as_deref().filter(|p| p.exists()) {
        let mut rdr = csv::Reader::from_path(p)?;
        check_header(p, &mut rdr, &["series_id"])?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let Some(&k) = index.get(rec[0].trim()) else {
                return Err(malformed(p, line, format!("unknown series `{}`", &rec[0])));
            };
            let cov = rec
                .iter()
                .skip(1)
                .map(|v| parse_f64(p, line, "covariate", v))
                .collect::<Result<Vec<_>, _>>()?;
            series[k].static_covariates = Some(cov);
        }
    }

    Ok(Dataset {
        series,
        features,
        classes,
        normalization: meta.and_then(|m| m.normalization),
        time_range: Some((t0, t1)),
    })
}

/// Stratified three-way split by label.
pub fn split_stratified(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    check_ratios(ratios)?;
    let labels = ds.labels().filter(|_| ds.is_labeled()).ok_or(DataError::Unlabeled)?;
    Ok(split_groups(ds, &labels, ratios, seed))
}

/// Three-way split that stratifies labeled datasets and shuffles unlabeled ones.
pub fn split_dataset(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if ds.is_labeled() {
        return split_stratified(ds, ratios, seed);
    }
    check_ratios(ratios)?;
    Ok(split_groups(ds, &vec![0; ds.len()], ratios, seed))
}

fn check_ratios(ratios: [f64; 3]) -> Result<(), DataError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    Ok(())
}

fn split_groups(ds: &Dataset, groups: &[usize], ratios: [f64; 3], seed: u64) -> (Dataset, Dataset, Dataset) {
    let count = groups.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for c in 0..count {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| groups[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    (ds.subset(&parts[0]), ds.subset(&parts[1]), ds.subset(&parts[2]))
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-normalization fitted on observed training cells.
pub fn fit_normalization(train: &Dataset) -> Result<NormStats, DataError> {
    let d = train.features;
    let mut count = vec![0usize; d];
    let mut sum = vec![0.0; d];
    for s in &train.series {
        for c in s.cells() {
            count[c.feature] += 1;
            sum[c.feature] += c.value;
        }
    }
    if let Some(feature) = (0..d).find(|&f| count[f] < 2) {
        return Err(DataError::UnderObservedFeature {
            feature,
            count: count[feature],
        });
    }
    let mean: Vec<f64> = (0..d).map(|f| sum[f] / count[f] as f64).collect();
    let mut ss = vec![0.0; d];
    for s in &train.series {
        for c in s.cells() {
            let dv = c.value - mean[c.feature];
            ss[c.feature] += dv * dv;
        }
    }
    let std = (0..d)
        .map(|f| (ss[f] / count[f] as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

/// Normalizes `train` and every dataset in `others` with training statistics.
pub fn znormalize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, NormStats), DataError> {
    let stats = fit_normalization(train)?;
    for o in others {
        if o.features != train.features {
            return Err(DataError::FeatureMismatch {
                expected: train.features,
                found: o.features,
            });
        }
    }
    let others = others.iter().map(|o| stats.apply_dataset(o)).collect();
    Ok((stats.apply_dataset(train), others, stats))
}

/// Training observations plus the interpolation and extrapolation targets.
/// Target lists are aligned with `training.series`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub t_cut: f64,
    pub training: Dataset,
    pub interpolation: Vec<Vec<Cell>>,
    pub extrapolation: Vec<Vec<Cell>>,
}

pub const DEFAULT_T_CUT: f64 = 0.8;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

pub fn holdout_observations(ds: &Dataset, fraction: f64, t_cut: f64, seed: u64) -> Result<HoldoutSplit, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    if !(t_cut > 0.0 && t_cut <= 1.0) {
        return Err(DataError::InvalidCut(t_cut));
    }
    let mut training = Vec::with_capacity(ds.len());
    let mut interpolation = Vec::with_capacity(ds.len());
    let mut extrapolation = Vec::with_capacity(ds.len());
    for (i, s) in ds.series.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let (before, after): (Vec<Cell>, Vec<Cell>) = s.cells().partition(|c| c.time < t_cut);
        let k = (fraction * before.len() as f64).floor() as usize;
        let mut held = vec![false; before.len()];
        for j in index::sample(&mut rng, before.len(), k) {
            held[j] = true;
        }
        let (interp, keep): (Vec<(Cell, bool)>, Vec<(Cell, bool)>) =
            before.into_iter().zip(held).partition(|(_, h)| *h);
        let keep: Vec<Cell> = keep.into_iter().map(|(c, _)| c).collect();
        training.push(IrregularSeries::from_cells(s, ds.features, &keep));
        interpolation.push(interp.into_iter().map(|(c, _)| c).collect());
        extrapolation.push(after);
    }
    Ok(HoldoutSplit {
        t_cut,
        training: ds.with_series(training),
        interpolation,
        extrapolation,
    })
}

pub const MAX_NOISE_LEVEL: u32 = 9;

/// Standard deviation of the injected noise at normalized time `t`.
pub fn noise_scale(level: u32, t: f64) -> f64 {
    0.1 * (level as f64).powf(t)
}

/// Adds zero-mean Gaussian noise with std `0.1·level^t` to every observed value.
pub fn inject_noise(ds: &Dataset, level: u32, seed: u64) -> Result<Dataset, DataError> {
    if level > MAX_NOISE_LEVEL {
        return Err(DataError::InvalidNoiseLevel(level));
    }
    let mut out = ds.clone();
    if level == 0 {
        return Ok(out);
    }
    for (i, s) in out.series.iter_mut().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        for (k, &t) in s.times.iter().enumerate() {
            let normal = Normal::new(0.0, noise_scale(level, t)).expect("positive sigma");
            for (v, m) in s.values[k].iter_mut().zip(&s.masks[k]) {
                if *m {
                    *v += normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(out)
}
