use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, DecisionBounds, DecisionVector, EconomicParams, Objective, ProxyField, DECISION_DIM};
use crate::error::{Error, Result};
use crate::model::TrainSplit;
use crate::optimizer::de::{de_select, de_trials};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Evolutionary-search settings of the optimizer-trace sampler.
const TRACE_POPULATION: usize = 20;
const TRACE_GENERATIONS: usize = 100;
const TRACE_WEIGHT: f64 = 0.7;
const TRACE_CROSSOVER: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Independent uniform draws over the decision box.
    Uniform,
    /// Every point evaluated by short differential-evolution searches.
    OptimizerTrace,
}

/// Per-feature and target z-score statistics, fitted on the training rows.
/// Zero-variance columns are left unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub feature_scaled: Vec<bool>,
    pub target_mean: f64,
    pub target_std: f64,
    pub target_scaled: bool,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Normalization {
    pub fn fit(x: &Array2<f64>, y: &Array1<f64>) -> Self {
        let mut feature_mean = Vec::with_capacity(x.ncols());
        let mut feature_std = Vec::with_capacity(x.ncols());
        let mut feature_scaled = Vec::with_capacity(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let (m, s) = mean_std(col.iter().copied());
            if s > 0.0 && s.is_finite() {
                feature_mean.push(m);
                feature_std.push(s);
                feature_scaled.push(true);
            } else {
                log::warn!("feature {j} has zero variance; leaving it unscaled");
                feature_mean.push(0.0);
                feature_std.push(1.0);
                feature_scaled.push(false);
            }
        }
        let (tm, ts) = mean_std(y.iter().copied());
        let target_scaled = ts > 0.0 && ts.is_finite();
        if !target_scaled {
            log::warn!("target has zero variance; leaving it unscaled");
        }
        Normalization {
            feature_mean,
            feature_std,
            feature_scaled,
            target_mean: if target_scaled { tm } else { 0.0 },
            target_std: if target_scaled { ts } else { 1.0 },
            target_scaled,
        }
    }

    pub fn width(&self) -> usize {
        self.feature_mean.len()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.width() {
            return Err(Error::shape("normalized features", &[x.nrows(), self.width()], x.shape()));
        }
        Ok(())
    }

    pub fn normalize_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if self.feature_scaled[j] {
                let (m, s) = (self.feature_mean[j], self.feature_std[j]);
                col.mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(out)
    }

    pub fn denormalize_features(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(z)?;
        let mut out = z.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if self.feature_scaled[j] {
                let (m, s) = (self.feature_mean[j], self.feature_std[j]);
                col.mapv_inplace(|v| v * s + m);
            }
        }
        Ok(out)
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    /// Converts a standard deviation in normalized target units to raw units.
    pub fn denormalize_target_std(&self, s: f64) -> f64 {
        s * self.target_std
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Split {
    /// Seeded shuffle, then 80% train and 20% holdout. At least one row
    /// always lands in the training part.
    pub fn shuffled(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut crate::seed::stream(seed, "split", 0));
        let holdout_len = ((n as f64) * HOLDOUT_FRACTION).round() as usize;
        let holdout_len = holdout_len.min(n.saturating_sub(1));
        let holdout = idx.split_off(n - holdout_len);
        Split { train: idx, holdout }
    }
}

/// Raw decision vectors with objective values, their split and the
/// normalization fitted on the training part.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub normalization: Normalization,
    pub split: Split,
    pub meta: DatasetSidecar,
}

/// Everything about a dataset except its rows; written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub rows: usize,
    pub field_seed: u64,
    pub objective: Objective,
    pub economics: EconomicParams,
    pub sampler: Sampler,
    pub noise_std: f64,
    pub seed: u64,
    pub bounds: DecisionBounds,
    pub normalization: Normalization,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Normalized features and targets of the given rows.
    pub fn normalized_rows(&self, rows: &[usize]) -> Result<(Array2<f64>, Array1<f64>)> {
        let x = self.normalization.normalize_features(&self.x.select(Axis(0), rows))?;
        let y = self
            .y
            .select(Axis(0), rows)
            .mapv(|v| self.normalization.normalize_target(v));
        Ok((x, y))
    }

    /// Normalized train and holdout arrays; the holdout doubles as the
    /// validation set.
    pub fn train_split(&self) -> Result<TrainSplit> {
        let (x_train, y_train) = self.normalized_rows(&self.split.train)?;
        let (x_val, y_val) = self.normalized_rows(&self.split.holdout)?;
        Ok(TrainSplit {
            x_train,
            y_train,
            x_val,
            y_val,
        })
    }
}

/// Draws `n` labelled samples from the proxy field.
///
/// Every row has its own noise stream derived from `(seed, row)`, so the
/// output does not depend on the thread count.
pub fn generate_dataset(
    n: usize,
    field: &ProxyField,
    objective: Objective,
    economics: &EconomicParams,
    sampler: Sampler,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be >= 0".into()));
    }
    field.validate()?;
    economics.validate()?;
    let bounds = field.bounds();
    let label = |d: &[f64], row: usize| -> Result<f64> {
        let d = DecisionVector::new(d.to_vec())?;
        let mut rng = crate::seed::stream(seed, "row-noise", row as u64);
        evaluate(&d, field, objective, economics, noise_std, &mut rng)
    };

    let rows: Vec<(Vec<f64>, f64)> = match sampler {
        Sampler::Uniform => (0..n)
            .into_par_iter()
            .map(|i| {
                let d = bounds.sample_point(&mut crate::seed::stream(seed, "row", i as u64));
                let v = label(&d, i)?;
                Ok((d, v))
            })
            .collect::<Result<_>>()?,
        Sampler::OptimizerTrace => {
            let per_search = TRACE_POPULATION * (TRACE_GENERATIONS + 1);
            let searches = n.div_ceil(per_search);
            let traces: Vec<Vec<(Vec<f64>, f64)>> = (0..searches)
                .into_par_iter()
                .map(|s| trace_search(s, per_search, &bounds, seed, &label))
                .collect::<Result<_>>()?;
            traces.into_iter().flatten().take(n).collect()
        }
    };

    let mut x = Array2::zeros((n, DECISION_DIM));
    let mut y = Array1::zeros(n);
    for (i, (d, v)) in rows.into_iter().enumerate() {
        x.row_mut(i).assign(&Array1::from(d));
        y[i] = v;
    }
    let split = Split::shuffled(n, seed);
    let normalization = Normalization::fit(
        &x.select(Axis(0), &split.train),
        &y.select(Axis(0), &split.train),
    );
    let meta = DatasetSidecar {
        format_version: DATASET_FORMAT_VERSION,
        rows: n,
        field_seed: field.seed,
        objective,
        economics: economics.clone(),
        sampler,
        noise_std,
        seed,
        bounds,
        normalization: normalization.clone(),
        split: split.clone(),
    };
    Ok(LabeledDataset {
        x,
        y,
        normalization,
        split,
        meta,
    })
}

/// One short maximizing search; returns every evaluated point in order.
fn trace_search(
    s: usize,
    per_search: usize,
    bounds: &DecisionBounds,
    seed: u64,
    label: &(dyn Fn(&[f64], usize) -> Result<f64> + Sync),
) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut rng = crate::seed::stream(seed, "trace-search", s as u64);
    let base = s * per_search;
    let mut out = Vec::with_capacity(per_search);
    let mut pop: Vec<Vec<f64>> = (0..TRACE_POPULATION)
        .map(|_| bounds.sample_point(&mut rng))
        .collect();
    let mut cost = Vec::with_capacity(TRACE_POPULATION);
    for d in &pop {
        let v = label(d, base + out.len())?;
        out.push((d.clone(), v));
        cost.push(-v);
    }
    for _ in 0..TRACE_GENERATIONS {
        let trials = de_trials(&pop, TRACE_WEIGHT, TRACE_CROSSOVER, bounds, &mut rng)?;
        let mut trial_cost = Vec::with_capacity(trials.len());
        for d in &trials {
            let v = label(d, base + out.len())?;
            out.push((d.clone(), v));
            trial_cost.push(-v);
        }
        de_select(&mut pop, &mut cost, trials, &trial_cost);
    }
    Ok(out)
}

fn header() -> Vec<String> {
    (0..DECISION_DIM)
        .map(|j| format!("x{j:03}"))
        .chain(std::iter::once("y".to_string()))
        .collect()
}

/// Writes `<stem>.csv` and `<stem>.json` (the sidecar).
pub fn write_dataset(ds: &LabeledDataset, csv_path: &Path) -> Result<()> {
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header())?;
    for (row, y) in ds.x.rows().into_iter().zip(ds.y.iter()) {
        w.write_record(row.iter().chain(std::iter::once(y)).map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let side = csv_path.with_extension("json");
    let mut f = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
    serde_json::to_writer_pretty(&mut f, &ds.meta)?;
    f.flush().map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn read_dataset(csv_path: &Path) -> Result<LabeledDataset> {
    let side = csv_path.with_extension("json");
    let meta: DatasetSidecar = serde_json::from_reader(BufReader::new(
        File::open(&side).map_err(|e| Error::io(&side, e))?,
    ))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let file = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let expected = header();
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(Error::Data(format!(
            "{}: unexpected header (want x000..x{:03},y)",
            csv_path.display(),
            DECISION_DIM - 1
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{} row {}: {e}", csv_path.display(), i + 1)))?;
        x.extend_from_slice(&vals[..DECISION_DIM]);
        y.push(vals[DECISION_DIM]);
    }
    let n = y.len();
    if n != meta.rows {
        return Err(Error::Data(format!(
            "{} has {n} rows, sidecar says {}",
            csv_path.display(),
            meta.rows
        )));
    }
    let x = Array2::from_shape_vec((n, DECISION_DIM), x)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(LabeledDataset {
        x,
        y: Array1::from(y),
        normalization: meta.normalization.clone(),
        split: meta.split.clone(),
        meta,
    })
}
