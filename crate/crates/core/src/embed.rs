//! Latent embeddings, 2-D projections (PCA and exact t-SNE) and the CSV
//! files used to plot them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::nn::Tensor2;

/// Largest point count accepted by the exact t-SNE.
pub const TSNE_MAX_POINTS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingMeta {
    pub latent_dim: usize,
    pub beta: f64,
    pub layer_kind: LayerKind,
}

/// Posterior means (one row per sample) with the matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: Tensor2,
    pub targets: Vec<f64>,
    pub meta: EmbeddingMeta,
}

/// Encoder posterior means for standardized inputs `x`; no sampling noise.
pub fn extract_embeddings(model: &mut Model, x: &Tensor2, targets: &[f64]) -> Result<EmbeddingSet> {
    if !model.trained {
        return Err(Error::Untrained("embeddings need a trained model".into()));
    }
    if x.nrows() != targets.len() {
        return Err(Error::shape("embedding targets", &[x.nrows()], &[targets.len()]));
    }
    if x.nrows() < 2 {
        return Err(Error::Data(format!("need at least 2 samples to embed, got {}", x.nrows())));
    }
    let matrix = model.embed(x)?;
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent embedding".into()));
    }
    Ok(EmbeddingSet {
        matrix,
        targets: targets.to_vec(),
        meta: EmbeddingMeta {
            latent_dim: model.config.latent_dim,
            beta: model.config.beta,
            layer_kind: model.config.layer_kind,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ProjectionMethod {
    Pca {
        /// Fraction of total variance on each output axis.
        explained_variance_ratio: [f64; 2],
    },
    Tsne {
        #[serde(flatten)]
        config: TsneConfig,
        initial_kl: f64,
        final_kl: f64,
        /// Points whose bandwidth search stopped at the iteration cap.
        unconverged: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2D {
    pub coords: Array2<f64>,
    pub method: ProjectionMethod,
}

/// Centers the data and projects onto the two leading eigenvectors of the
/// covariance. Each axis is signed so its largest-magnitude loading is
/// positive. Missing axes (one-column input) are zero.
pub fn pca_project(data: &Tensor2) -> Result<Projection2D> {
    let (n, d) = data.dim();
    if n <= 2 {
        return Err(Error::Data(format!("PCA to 2 dimensions needs more than 2 points, got {n}")));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = data - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut coords = Array2::zeros((n, 2));
    let mut ratio = [0.0; 2];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let v = Array1::from(v);
        coords.column_mut(axis).assign(&centered.dot(&v));
        ratio[axis] = if total > 0.0 {
            eig.eigenvalues[k].max(0.0) / total
        } else {
            0.0
        };
    }
    Ok(Projection2D {
        coords,
        method: ProjectionMethod::Pca {
            explained_variance_ratio: ratio,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

const ENTROPY_TOL: f64 = 1e-5;
const BANDWIDTH_STEPS: usize = 200;

fn squared_distances(x: &Tensor2) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional affinities of row `i` at precision `beta`, and their entropy
/// in bits.
fn conditional_row(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-(d - min) * beta).exp() })
        .collect();
    let sum: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= sum;
        if *v > 0.0 {
            h -= *v * v.log2();
        }
    }
    (p, h)
}

/// Bisection on the precision of each point so the conditional entropy
/// equals `log2(perplexity)`. Returns the conditional matrix and the rows
/// that did not reach the tolerance.
pub fn conditional_affinities(dist: &Array2<f64>, perplexity: f64) -> (Array2<f64>, Vec<usize>) {
    let n = dist.nrows();
    let target = perplexity.log2();
    let rows: Vec<(Vec<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = dist.row(i).to_vec();
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0;
            let (mut p, mut h) = conditional_row(&d, i, beta);
            for _ in 0..BANDWIDTH_STEPS {
                let diff = h - target;
                if diff.abs() < ENTROPY_TOL {
                    return (p, true);
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
                (p, h) = conditional_row(&d, i, beta);
            }
            let ok = (h - target).abs() < ENTROPY_TOL;
            (p, ok)
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    let mut unconverged = Vec::new();
    for (i, (p, ok)) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&Array1::from(p));
        if !ok {
            unconverged.push(i);
        }
    }
    (out, unconverged)
}

fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2);
                num[[i, j]] = 1.0 / (1.0 + d);
                z += num[[i, j]];
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[[i, j]];
            if i != j && pij > 0.0 {
                let q = (num[[i, j]] / z).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE to two dimensions.
pub fn tsne_project(data: &Tensor2, config: &TsneConfig) -> Result<Projection2D> {
    let n = data.nrows();
    if n > TSNE_MAX_POINTS {
        return Err(Error::Config(format!(
            "exact t-SNE is limited to {TSNE_MAX_POINTS} points, got {n}; subsample first"
        )));
    }
    let max_perplexity = (n as f64 - 1.0) / 3.0;
    if !(config.perplexity >= 5.0 && config.perplexity <= max_perplexity) {
        return Err(Error::Config(format!(
            "perplexity {} is infeasible for {n} points (needs 5 <= perplexity <= {max_perplexity:.3})",
            config.perplexity
        )));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("t-SNE learning_rate must be > 0".into()));
    }

    let (cond, unconverged) = conditional_affinities(&squared_distances(data), config.perplexity);
    if !unconverged.is_empty() {
        log::warn!("t-SNE bandwidth search did not converge for {} points", unconverged.len());
    }
    let mut p = (&cond + &cond.t()) / (2.0 * n as f64);
    p.mapv_inplace(|v| v.max(1e-12));
    p.diag_mut().fill(0.0);

    let mut rng = crate::seed::stream(config.seed, "tsne-init", 0);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let initial_kl = kl_divergence(&p, &y);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut grad = Array2::<f64>::zeros((n, 2));

    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.exaggeration_iterations {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[[i, 0]] - y[[j, 0]]).powi(2) + (y[[i, 1]] - y[[j, 1]]).powi(2);
                let v = 1.0 / (1.0 + d);
                num[[i, j]] = v;
                num[[j, i]] = v;
                z += 2.0 * v;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                g0 += w * (y[[i, 0]] - y[[j, 0]]);
                g1 += w * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * g0;
            grad[[i, 1]] = 4.0 * g1;
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                *gain * 0.8
            }
            .max(0.01);
            *u = momentum * *u - config.learning_rate * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE coordinates".into()));
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(Projection2D {
        coords: y,
        method: ProjectionMethod::Tsne {
            config: config.clone(),
            initial_kl,
            final_kl,
            unconverged,
        },
    })
}

/// One crossplot row, in raw objective units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossplotRow {
    pub truth: f64,
    pub pred_mean: f64,
    pub pred_std: f64,
    pub split: String,
}

pub fn export_crossplot(rows: &[CrossplotRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Data("crossplot needs at least one row".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_crossplot(path: &Path) -> Result<Vec<CrossplotRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Sidecar written next to a projection CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSidecar {
    pub format_version: u32,
    #[serde(flatten)]
    pub method: ProjectionMethod,
    pub embedding: EmbeddingMeta,
    pub points: usize,
    /// SHA-256 of the checkpoint the embeddings came from.
    pub checkpoint_sha256: String,
}

/// Writes `id,dim1,dim2,target_scaled` and a JSON sidecar with the same stem.
pub fn export_projection(
    proj: &Projection2D,
    targets_scaled: &[f64],
    sidecar: &ProjectionSidecar,
    path: &Path,
) -> Result<()> {
    if proj.coords.nrows() != targets_scaled.len() {
        return Err(Error::shape(
            "projection targets",
            &[proj.coords.nrows()],
            &[targets_scaled.len()],
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["id", "dim1", "dim2", "target_scaled"])?;
    for (i, (row, t)) in proj.coords.rows().into_iter().zip(targets_scaled).enumerate() {
        w.write_record([i.to_string(), row[0].to_string(), row[1].to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    let mut f = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
    serde_json::to_writer_pretty(&mut f, sidecar)?;
    f.flush().map_err(|e| Error::io(&side, e))
}
