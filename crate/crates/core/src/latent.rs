//! Gaussian latent heads.
//!
//! Two parameterizations of the approximate posterior `q(z | x)`, both
//! regularized toward the standard-normal prior `N(0, I)`:
//!
//! * **Mean-field** — independent Gaussians, `z = μ + σ ⊙ ε` (reparameterized),
//!   `KL = -½ Σ_j (1 + log σ²_j − μ²_j − σ²_j)`.
//! * **Full-covariance** — `z = μ + L ε` with `L` a lower-triangular Cholesky
//!   factor, drawn jointly from `N(μ, L Lᵀ)`,
//!   `KL = ½ (tr(L Lᵀ) + μᵀμ − J − 2 Σ_j log L_jj)`.
//!
//! The per-sample functions below are the reference definitions; [`LatentHead`]
//! applies them row by row to a batch of encoder outputs and backpropagates
//! through them.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Pass, Rng, Tensor2};

/// Clamp range for latent log-variances before exponentiation.
pub const LOG_VAR_MIN: f64 = -60.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Floor added to the softplus-mapped Cholesky diagonal.
pub const CHOL_DIAG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    MeanField,
    FullCov,
}

impl LatentKind {
    /// Number of encoder outputs needed to parameterize a `dim`-dimensional
    /// posterior.
    pub fn param_width(self, dim: usize) -> usize {
        match self {
            LatentKind::MeanField => 2 * dim,
            LatentKind::FullCov => dim + triangular_len(dim),
        }
    }
}

pub fn triangular_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldPosterior {
    pub mean: Array1<f64>,
    pub log_variance: Array1<f64>,
}

impl MeanFieldPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn clamped_log_variance(&self) -> Array1<f64> {
        self.log_variance
            .mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
    }

    pub fn std(&self) -> Array1<f64> {
        self.clamped_log_variance().mapv(|v| (0.5 * v).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullCovPosterior {
    pub mean: Array1<f64>,
    /// Lower-triangular with a strictly positive diagonal.
    pub chol_factor: Array2<f64>,
}

impl FullCovPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Array2<f64> {
        self.chol_factor.dot(&self.chol_factor.t())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Array1<f64>,
    pub noise_used: Array1<f64>,
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`, summed over dimensions.
pub fn meanfield_kl(post: &MeanFieldPosterior) -> f64 {
    let lv = post.clamped_log_variance();
    -0.5 * post
        .mean
        .iter()
        .zip(lv.iter())
        .map(|(&m, &v)| 1.0 + v - m * m - v.exp())
        .sum::<f64>()
}

/// Gradient of [`meanfield_kl`] with respect to `(mean, log_variance)`.
pub fn meanfield_kl_grad(post: &MeanFieldPosterior) -> (Array1<f64>, Array1<f64>) {
    let d_log_var = post.log_variance.mapv(|v| {
        if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
            0.5 * (v.exp() - 1.0)
        } else {
            0.0
        }
    });
    (post.mean.clone(), d_log_var)
}

/// `z = μ + σ ⊙ noise`.
pub fn meanfield_sample(post: &MeanFieldPosterior, noise: &Array1<f64>) -> Result<LatentSample> {
    if noise.len() != post.dim() {
        return Err(Error::shape("latent noise", &[post.dim()], &[noise.len()]));
    }
    Ok(LatentSample {
        z: &post.mean + &(post.std() * noise),
        noise_used: noise.clone(),
    })
}

/// Backpropagates `dz` through [`meanfield_sample`] to `(mean, log_variance)`.
pub fn meanfield_sample_backward(
    post: &MeanFieldPosterior,
    noise: &Array1<f64>,
    dz: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let std = post.std();
    let mut d_log_var = dz * noise * &std * 0.5;
    for (d, &v) in d_log_var.iter_mut().zip(post.log_variance.iter()) {
        if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
            *d = 0.0;
        }
    }
    (dz.clone(), d_log_var)
}

fn check_chol(post: &FullCovPosterior) -> Result<()> {
    let j = post.dim();
    if post.chol_factor.dim() != (j, j) {
        return Err(Error::shape(
            "cholesky factor",
            &[j, j],
            post.chol_factor.shape(),
        ));
    }
    for (i, &d) in post.chol_factor.diag().iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::Domain(format!(
                "cholesky diagonal entry {i} must be positive, got {d}"
            )));
        }
    }
    Ok(())
}

/// Closed-form `KL(N(μ, L Lᵀ) ‖ N(0, I))`.
///
/// Only the lower triangle of `chol_factor` is read.
pub fn fullcov_kl(post: &FullCovPosterior) -> Result<f64> {
    check_chol(post)?;
    let j = post.dim();
    let mut trace = 0.0;
    let mut log_det_half = 0.0;
    for r in 0..j {
        for c in 0..=r {
            let v = post.chol_factor[[r, c]];
            trace += v * v;
        }
        log_det_half += post.chol_factor[[r, r]].ln();
    }
    let mu2 = post.mean.dot(&post.mean);
    Ok(0.5 * (trace + mu2 - j as f64 - 2.0 * log_det_half))
}

/// Gradient of [`fullcov_kl`] with respect to `(mean, L)`; the returned
/// factor gradient is lower-triangular.
pub fn fullcov_kl_grad(post: &FullCovPosterior) -> (Array1<f64>, Array2<f64>) {
    let j = post.dim();
    let mut d_l = Array2::zeros((j, j));
    for r in 0..j {
        for c in 0..r {
            d_l[[r, c]] = post.chol_factor[[r, c]];
        }
        let d = post.chol_factor[[r, r]];
        d_l[[r, r]] = d - 1.0 / d;
    }
    (post.mean.clone(), d_l)
}

/// `z = μ + L · noise`.
pub fn fullcov_sample(post: &FullCovPosterior, noise: &Array1<f64>) -> Result<LatentSample> {
    if noise.len() != post.dim() {
        return Err(Error::shape("latent noise", &[post.dim()], &[noise.len()]));
    }
    let mut z = post.mean.clone();
    lower_matvec_add(&post.chol_factor, noise.view(), &mut z);
    Ok(LatentSample {
        z,
        noise_used: noise.clone(),
    })
}

fn lower_matvec_add(l: &Array2<f64>, v: ArrayView1<f64>, out: &mut Array1<f64>) {
    for r in 0..l.nrows() {
        let mut acc = 0.0;
        for c in 0..=r {
            acc += l[[r, c]] * v[c];
        }
        out[r] += acc;
    }
}

/// Backpropagates `dz` through [`fullcov_sample`]: `dμ = dz`,
/// `dL_rc = dz_r · noise_c` for `c ≤ r`.
pub fn fullcov_sample_backward(noise: &Array1<f64>, dz: &Array1<f64>) -> (Array1<f64>, Array2<f64>) {
    let j = dz.len();
    let mut d_l = Array2::zeros((j, j));
    for r in 0..j {
        for c in 0..=r {
            d_l[[r, c]] = dz[r] * noise[c];
        }
    }
    (dz.clone(), d_l)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps an unconstrained vector (row-major lower triangle:
/// `(0,0), (1,0), (1,1), (2,0), …`) to a Cholesky factor. Off-diagonal
/// entries are copied; diagonal entries become `softplus(raw) + 1e-6`.
pub fn chol_parameterize(raw: ArrayView1<f64>, dim: usize) -> Result<Array2<f64>> {
    if raw.len() != triangular_len(dim) {
        return Err(Error::shape(
            "cholesky parameters",
            &[triangular_len(dim)],
            &[raw.len()],
        ));
    }
    let mut l = Array2::zeros((dim, dim));
    let mut k = 0;
    for r in 0..dim {
        for c in 0..=r {
            l[[r, c]] = if r == c {
                softplus(raw[k]) + CHOL_DIAG_FLOOR
            } else {
                raw[k]
            };
            k += 1;
        }
    }
    Ok(l)
}

/// Chain rule through [`chol_parameterize`].
pub fn chol_parameterize_backward(raw: ArrayView1<f64>, d_l: &Array2<f64>) -> Array1<f64> {
    let dim = d_l.nrows();
    let mut out = Array1::zeros(raw.len());
    let mut k = 0;
    for r in 0..dim {
        for c in 0..=r {
            out[k] = if r == c {
                d_l[[r, c]] * sigmoid(raw[k])
            } else {
                d_l[[r, c]]
            };
            k += 1;
        }
    }
    out
}

/// Result of running a latent head over a batch.
#[derive(Clone, Debug)]
pub struct LatentOutput {
    /// Latent codes passed downstream (`B x J`).
    pub z: Tensor2,
    /// Posterior means (`B x J`).
    pub mean: Tensor2,
    /// Per-sample KL to the prior (`B`).
    pub kl: Array1<f64>,
}

/// Batched latent head sitting between the encoder output and the
/// decoder/regressor inputs.
#[derive(Clone, Debug)]
pub struct LatentHead {
    pub kind: LatentKind,
    pub dim: usize,
    params: Option<Tensor2>,
    noise: Option<Tensor2>,
}

impl LatentHead {
    pub fn new(kind: LatentKind, dim: usize) -> Self {
        LatentHead {
            kind,
            dim,
            params: None,
            noise: None,
        }
    }

    pub fn param_width(&self) -> usize {
        self.kind.param_width(self.dim)
    }

    pub fn meanfield_row(&self, row: ArrayView1<f64>) -> MeanFieldPosterior {
        let j = self.dim;
        MeanFieldPosterior {
            mean: row.slice(s![..j]).to_owned(),
            log_variance: row.slice(s![j..2 * j]).to_owned(),
        }
    }

    pub fn fullcov_row(&self, row: ArrayView1<f64>) -> Result<FullCovPosterior> {
        let j = self.dim;
        Ok(FullCovPosterior {
            mean: row.slice(s![..j]).to_owned(),
            chol_factor: chol_parameterize(row.slice(s![j..]), j)?,
        })
    }

    /// Splits encoder outputs into posteriors, draws (or replays) noise, and
    /// returns `z`. With `pass.sample_latent == false` the noise is zero and
    /// `z` equals the posterior mean.
    pub fn forward(&mut self, params: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<LatentOutput> {
        let (b, width) = params.dim();
        if width != self.param_width() {
            return Err(Error::shape(
                "latent head input",
                &[b, self.param_width()],
                params.shape(),
            ));
        }
        let j = self.dim;
        let noise = match (&self.noise, pass.replay) {
            (Some(n), true) if n.dim() == (b, j) => n.clone(),
            _ if pass.sample_latent => {
                Tensor2::from_shape_simple_fn((b, j), || StandardNormal.sample(rng))
            }
            _ => Tensor2::zeros((b, j)),
        };
        let mean = params.slice(s![.., ..j]).to_owned();
        let mut z = Tensor2::zeros((b, j));
        let mut kl = Array1::zeros(b);
        for i in 0..b {
            let row = params.row(i);
            let eps = noise.row(i).to_owned();
            let (sample, k) = match self.kind {
                LatentKind::MeanField => {
                    let post = self.meanfield_row(row);
                    (meanfield_sample(&post, &eps)?, meanfield_kl(&post))
                }
                LatentKind::FullCov => {
                    let post = self.fullcov_row(row)?;
                    (fullcov_sample(&post, &eps)?, fullcov_kl(&post)?)
                }
            };
            z.row_mut(i).assign(&sample.z);
            kl[i] = k;
        }
        self.params = Some(params.clone());
        self.noise = Some(noise);
        Ok(LatentOutput { z, mean, kl })
    }

    /// Gradient with respect to the encoder outputs given the gradient of
    /// the loss with respect to `z` and the weight applied to each sample's
    /// KL term in the loss.
    pub fn backward(&self, dz: &Tensor2, kl_weight: f64) -> Result<Tensor2> {
        let (params, noise) = match (&self.params, &self.noise) {
            (Some(p), Some(n)) => (p, n),
            _ => return Err(Error::Config("latent backward called before forward".into())),
        };
        if dz.dim() != noise.dim() {
            return Err(Error::shape("latent upstream gradient", noise.shape(), dz.shape()));
        }
        let j = self.dim;
        let mut out = Tensor2::zeros(params.raw_dim());
        for i in 0..params.nrows() {
            let row = params.row(i);
            let eps = noise.row(i).to_owned();
            let g = dz.row(i).to_owned();
            match self.kind {
                LatentKind::MeanField => {
                    let post = self.meanfield_row(row);
                    let (dm, dlv) = meanfield_sample_backward(&post, &eps, &g);
                    let (km, klv) = meanfield_kl_grad(&post);
                    out.slice_mut(s![i, ..j]).assign(&(dm + km * kl_weight));
                    out.slice_mut(s![i, j..]).assign(&(dlv + klv * kl_weight));
                }
                LatentKind::FullCov => {
                    let post = self.fullcov_row(row)?;
                    let (dm, dl) = fullcov_sample_backward(&eps, &g);
                    let (km, kl_l) = fullcov_kl_grad(&post);
                    let d_l = dl + kl_l * kl_weight;
                    out.slice_mut(s![i, ..j]).assign(&(dm + km * kl_weight));
                    let d_raw = chol_parameterize_backward(row.slice(s![j..]), &d_l);
                    out.slice_mut(s![i, j..]).assign(&d_raw);
                }
            }
        }
        Ok(out)
    }

    pub fn last_noise(&self) -> Option<&Tensor2> {
        self.noise.as_ref()
    }
}

/// Mean of per-sample KL values over the batch.
pub fn batch_kl(kl: &Array1<f64>) -> f64 {
    kl.mean_axis(Axis(0)).map(|m| m.into_scalar()).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn mf(mean: Array1<f64>, log_variance: Array1<f64>) -> MeanFieldPosterior {
        MeanFieldPosterior { mean, log_variance }
    }

    #[test]
    fn meanfield_kl_reference_points() {
        assert_eq!(meanfield_kl(&mf(array![0.0, 0.0], array![0.0, 0.0])), 0.0);
        assert_eq!(meanfield_kl(&mf(array![1.0], array![0.0])), 0.5);
        let v = meanfield_kl(&mf(array![0.0], array![1.0]));
        assert!((v - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-15);
        assert!((v - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let post = mf(array![0.3, -1.0], array![0.2, -0.7]);
        let s = meanfield_sample(&post, &array![0.0, 0.0]).unwrap();
        assert_eq!(s.z, post.mean);
        let fc = FullCovPosterior {
            mean: array![1.0, 2.0],
            chol_factor: array![[1.0, 0.0], [0.5, 2.0]],
        };
        assert_eq!(fullcov_sample(&fc, &array![0.0, 0.0]).unwrap().z, fc.mean);
    }

    #[test]
    fn degenerate_variance_collapses_to_mean() {
        let post = mf(array![0.5], array![-1e6]);
        let s = meanfield_sample(&post, &array![3.0]).unwrap();
        assert!((s.z[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_factor_matches_unit_meanfield() {
        let mean = array![0.1, -0.4, 2.0];
        let noise = array![0.7, -1.1, 0.05];
        let fc = FullCovPosterior {
            mean: mean.clone(),
            chol_factor: Array2::eye(3),
        };
        let a = fullcov_sample(&fc, &noise).unwrap();
        let b = meanfield_sample(&mf(mean, Array1::zeros(3)), &noise).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(fullcov_kl(&FullCovPosterior { mean: Array1::zeros(3), chol_factor: Array2::eye(3) }).unwrap(), 0.0);
    }

    #[test]
    fn nonpositive_diagonal_is_domain_error() {
        let fc = FullCovPosterior {
            mean: array![0.0, 0.0],
            chol_factor: array![[1.0, 0.0], [0.2, 0.0]],
        };
        assert!(matches!(fullcov_kl(&fc), Err(Error::Domain(_))));
    }

    #[test]
    fn chol_parameterize_zero_and_floor() {
        let l = chol_parameterize(Array1::zeros(3).view(), 2).unwrap();
        assert!((l[[0, 0]] - (2f64.ln() + 1e-6)).abs() < 1e-15);
        assert_eq!(l[[1, 0]], 0.0);
        assert_eq!(l[[0, 1]], 0.0);
        let l = chol_parameterize(array![-800.0, 1.0, -800.0].view(), 2).unwrap();
        assert_eq!(l[[0, 0]], CHOL_DIAG_FLOOR);
        assert_eq!(l[[1, 1]], CHOL_DIAG_FLOOR);
        assert_eq!(l[[1, 0]], 1.0);
    }

    #[test]
    fn chol_parameterize_random_raws_are_valid_factors() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..100 {
            let raw = Array1::from_shape_simple_fn(10, || {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * 5.0
            });
            let l = chol_parameterize(raw.view(), 4).unwrap();
            for r in 0..4 {
                assert!(l[[r, r]] > 0.0);
                for c in r + 1..4 {
                    assert_eq!(l[[r, c]], 0.0);
                }
            }
        }
    }

    #[test]
    fn head_infer_pass_uses_posterior_mean() {
        let mut head = LatentHead::new(LatentKind::MeanField, 2);
        let params = array![[0.5, -0.5, 1.0, 1.0], [2.0, 0.0, -3.0, 0.0]];
        let mut rng = Rng::seed_from_u64(0);
        let out = head.forward(&params, Pass::infer(), &mut rng).unwrap();
        assert_eq!(out.z, out.mean);
        assert_eq!(out.z, array![[0.5, -0.5], [2.0, 0.0]]);
    }
}
