//! Monte Carlo predictive distributions, the accept-or-simulate gate, and
//! regression metrics.
//!
//! Everything here works in standardized target units unless a function
//! says otherwise.

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Tensor2;

pub const DEFAULT_MC_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertainPrediction {
    pub mean: f64,
    /// Unbiased sample standard deviation (divisor `T − 1`).
    pub std: f64,
    pub samples: Vec<f64>,
}

impl UncertainPrediction {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        let t = samples.len();
        if t < 2 {
            return Err(Error::Config(format!("need at least 2 samples, got {t}")));
        }
        // Identical samples keep their exact value rather than a rounded sum / t.
        let mean = if samples.iter().all(|&v| v == samples[0]) {
            samples[0]
        } else {
            samples.iter().sum::<f64>() / t as f64
        };
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
        Ok(UncertainPrediction {
            mean,
            std: var.sqrt(),
            samples,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// `T` stochastic passes over a batch of standardized inputs.
///
/// Each pass uses [`Model::mc_pass`]. Pass `k` draws from its own stream derived from
/// `(seed, k)`, and passes are gathered in index order, so the result does
/// not depend on the thread count.
pub fn mc_predict_batch(model: &Model, x: &Tensor2, t: usize, seed: u64) -> Result<Vec<UncertainPrediction>> {
    if !model.trained {
        return Err(Error::Untrained(
            "Monte Carlo prediction needs a trained model; train it or load a trained checkpoint".into(),
        ));
    }
    if t < 2 {
        return Err(Error::Config(format!("Monte Carlo sample count must be >= 2, got {t}")));
    }
    let passes: Vec<Array1<f64>> = (0..t)
        .into_par_iter()
        .map_init(
            || model.clone(),
            |m, k| {
                let mut rng = crate::seed::stream(seed, "mc-pass", k as u64);
                let pass = m.mc_pass();
                m.predict_pass(x, pass, &mut rng)
            },
        )
        .collect::<Result<_>>()?;
    (0..x.nrows())
        .map(|i| UncertainPrediction::from_samples(passes.iter().map(|p| p[i]).collect()))
        .collect()
}

/// Single-input form of [`mc_predict_batch`].
pub fn mc_predict(model: &Model, input: ArrayView1<'_, f64>, t: usize, seed: u64) -> Result<UncertainPrediction> {
    let x = input.to_owned().insert_axis(ndarray::Axis(0));
    Ok(mc_predict_batch(model, &x, t, seed)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Simulate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub verdict: Verdict,
    pub threshold_used: f64,
    pub std_observed: f64,
}

/// Accepts the surrogate value when `std <= threshold`; a tie accepts.
/// `threshold` is expected to be non-negative.
pub fn gate(pred: &UncertainPrediction, threshold: f64) -> GateDecision {
    GateDecision {
        verdict: if pred.std <= threshold {
            Verdict::Accept
        } else {
            Verdict::Simulate
        },
        threshold_used: threshold,
        std_observed: pred.std,
    }
}

fn check_pair(y: &[f64], y_hat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape("metric inputs", &[y.len()], &[y_hat.len()]));
    }
    if y.len() < min_len {
        return Err(Error::Data(format!(
            "metric needs at least {min_len} values, got {}",
            y.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, 1)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2_score(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, 2)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("R² is undefined for a constant target".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// One row of an evaluation report, in raw objective units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub truth: f64,
    pub point: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    /// MSE in standardized target units.
    pub mse: f64,
    /// MSE in raw objective units.
    pub mse_raw: f64,
    pub r2: f64,
}

impl Metrics {
    fn compute(truth_std: &[f64], pred_std: &[f64], truth_raw: &[f64], pred_raw: &[f64]) -> Result<Self> {
        Ok(Metrics {
            mse: mse(truth_std, pred_std)?,
            mse_raw: mse(truth_raw, pred_raw)?,
            r2: r2_score(truth_raw, pred_raw)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub mc_samples: usize,
    pub seed: u64,
    /// Deterministic pass: running statistics, no dropout, mean weights.
    pub point: Metrics,
    /// Monte Carlo predictive mean.
    pub mc_mean: Metrics,
    /// Predictive std summaries, standardized units.
    pub mean_std: f64,
    pub min_std: f64,
    pub max_std: f64,
    pub samples: Vec<SampleRecord>,
}

/// Point and Monte Carlo predictions for standardized `x` against
/// standardized `y`. Per-sample records are in raw units, converted with the
/// model's normalization when it has one.
pub fn evaluate_model(
    model: &mut Model,
    x: &Tensor2,
    y: &Array1<f64>,
    mc_samples: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    let point = model.predict(x)?.to_vec();
    let mc = mc_predict_batch(model, x, mc_samples, seed)?;
    let truth = y.to_vec();
    let means: Vec<f64> = mc.iter().map(|p| p.mean).collect();
    let norm = model.normalization.clone();
    let to_raw = |v: f64| norm.as_ref().map_or(v, |n| n.denormalize_target(v));
    let std_raw = |v: f64| norm.as_ref().map_or(v, |n| n.denormalize_target_std(v));
    let samples: Vec<SampleRecord> = truth
        .iter()
        .zip(&point)
        .zip(&mc)
        .map(|((&t, &p), u)| SampleRecord {
            truth: to_raw(t),
            point: to_raw(p),
            mean: to_raw(u.mean),
            std: std_raw(u.std),
        })
        .collect();
    let truth_raw: Vec<f64> = samples.iter().map(|s| s.truth).collect();
    let point_raw: Vec<f64> = samples.iter().map(|s| s.point).collect();
    let mean_raw: Vec<f64> = samples.iter().map(|s| s.mean).collect();
    let stds = mc.iter().map(|p| p.std);
    Ok(EvaluationReport {
        mc_samples,
        seed,
        point: Metrics::compute(&truth, &point, &truth_raw, &point_raw)?,
        mc_mean: Metrics::compute(&truth, &means, &truth_raw, &mean_raw)?,
        mean_std: stds.clone().sum::<f64>() / mc.len().max(1) as f64,
        min_std: stds.clone().fold(f64::INFINITY, f64::min),
        max_std: stds.fold(0.0, f64::max),
        samples,
    })
}
