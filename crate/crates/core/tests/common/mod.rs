#![allow(dead_code)]

pub mod grad;

use bvae_surrogate::field::{generate_dataset, EconomicParams, LabeledDataset, Objective, ProxyField, Sampler};
use bvae_surrogate::model::{train, Model, ModelConfig};
use bvae_surrogate::nn::{Rng, Tensor2};
use ndarray::Array1;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2 {
    Tensor2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn normal_vec(len: usize, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.sample(StandardNormal))
}

/// Weighted linear plus quadratic loss, `Σ c⊙o + ½ Σ o²`, and its gradient.
pub fn mixed_loss(c: &Tensor2) -> impl Fn(&Tensor2) -> (f64, Tensor2) + '_ {
    move |o: &Tensor2| {
        let v = (c * o).sum() + 0.5 * o.mapv(|x| x * x).sum();
        (v, c + o)
    }
}

/// Small narrow network for fast end-to-end tests.
pub fn small_config(input_dim: usize, latent_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        latent_dim,
        encoder_widths: vec![24, 16],
        decoder_widths: vec![16, 24],
        regressor_widths: vec![16, 8],
        epochs: 30,
        batch_size: 64,
        ..ModelConfig::default()
    }
}

pub fn small_field_dataset(n: usize, seed: u64) -> (ProxyField, LabeledDataset) {
    let field = ProxyField::generate(seed);
    let ds = generate_dataset(
        n,
        &field,
        Objective::Npv,
        &EconomicParams::default(),
        Sampler::Uniform,
        0.0,
        seed,
    )
    .expect("dataset");
    (field, ds)
}

/// A small NPV surrogate trained briefly on a uniform dataset.
pub fn trained_surrogate(n: usize, epochs: usize, seed: u64) -> (ProxyField, LabeledDataset, Model) {
    let (field, ds) = small_field_dataset(n, seed);
    let cfg = ModelConfig {
        epochs,
        seed,
        ..small_config(90, 3)
    };
    let mut model = Model::from_config(&cfg).unwrap();
    model.normalization = Some(ds.normalization.clone());
    train(&mut model, &ds.train_split().unwrap()).unwrap();
    (field, ds, model)
}

/// Independent Monte Carlo estimate of `KL(N(μ, LLᵀ) ‖ N(0, I))` from `n`
/// draws: mean and standard error of `log q(z) − log p(z)`.
pub fn mc_fullcov_kl(mean: &Array1<f64>, l: &ndarray::Array2<f64>, n: usize, rng: &mut Rng) -> (f64, f64) {
    let j = mean.len();
    let log_det: f64 = (0..j).map(|i| l[[i, i]].ln()).sum();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let e: Vec<f64> = (0..j).map(|_| rng.sample(StandardNormal)).collect();
        let mut z = vec![0.0; j];
        for r in 0..j {
            z[r] = mean[r] + (0..=r).map(|c| l[[r, c]] * e[c]).sum::<f64>();
        }
        // Forward substitution: L w = z − μ.
        let mut w = vec![0.0; j];
        for r in 0..j {
            let acc: f64 = (0..r).map(|c| l[[r, c]] * w[c]).sum();
            w[r] = (z[r] - mean[r] - acc) / l[[r, r]];
        }
        let log_q = -0.5 * w.iter().map(|v| v * v).sum::<f64>() - log_det;
        let log_p = -0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let d = log_q - log_p;
        sum += d;
        sum_sq += d * d;
    }
    let m = sum / n as f64;
    let var = (sum_sq / n as f64 - m * m) * n as f64 / (n as f64 - 1.0);
    (m, (var / n as f64).sqrt())
}

/// Random lower-triangular factor with diagonal in [0.4, 1.6].
pub fn random_factor(j: usize, rng: &mut Rng) -> ndarray::Array2<f64> {
    let mut l = ndarray::Array2::zeros((j, j));
    for r in 0..j {
        for c in 0..r {
            l[[r, c]] = rng.random_range(-0.6..0.6);
        }
        l[[r, r]] = rng.random_range(0.4..1.6);
    }
    l
}
