//! Finite-difference checks shared by the gradient tests and the acceptance
//! run. Each returns the worst relative error over `configs` random setups.

use bvae_surrogate::bayes::{VarDense, VarDenseParams};
use bvae_surrogate::latent::{LatentHead, LatentKind};
use bvae_surrogate::model::{joint_loss, LayerKind, Model, ModelConfig};
use bvae_surrogate::nn::{
    check_gradients, gradient_check, BatchNorm, Dense, DenseParams, Dropout, Eval, LeakyRelu, Parameters, Pass, Rng, Tensor2,
};
use rand::Rng as _;

use super::{mixed_loss, normal, normal_vec, rng};

pub const EPS: f64 = 1e-5;

fn dims(r: &mut Rng) -> (usize, usize, usize) {
    (r.random_range(2..7), r.random_range(1..6), r.random_range(1..6))
}

fn worst(configs: u64, f: impl Fn(u64) -> f64) -> f64 {
    (0..configs).map(f).fold(0.0, f64::max)
}

pub fn dense(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(100 + c);
        let (b, i, o) = dims(&mut r);
        let mut layer = Dense::new(DenseParams {
            weights: normal(i, o, &mut r),
            bias: normal_vec(o, &mut r),
        });
        let x = normal(b, i, &mut r);
        let w = normal(b, o, &mut r);
        gradient_check(&mut layer, &x, Pass::train(), &mut r, mixed_loss(&w), EPS).unwrap()
    })
}

/// Training-mode and inference-mode batch norm.
pub fn batch_norm(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(200 + c);
        let (b, _, o) = dims(&mut r);
        let mut layer = BatchNorm::new(o);
        layer.params.scale = normal_vec(o, &mut r);
        layer.params.shift = normal_vec(o, &mut r);
        layer.params.running_mean = normal_vec(o, &mut r);
        layer.params.running_var = normal_vec(o, &mut r).mapv(|v| v.abs() + 0.5);
        let x = normal(b, o, &mut r) * 2.0 + 0.3;
        let w = normal(b, o, &mut r);
        let train = gradient_check(&mut layer, &x, Pass::train(), &mut r, mixed_loss(&w), EPS).unwrap();
        let infer = gradient_check(&mut layer, &x, Pass::infer(), &mut r, mixed_loss(&w), EPS).unwrap();
        train.max(infer)
    })
}

/// Inputs are pushed at least 1e-3 away from the kink.
pub fn leaky_relu(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(300 + c);
        let (b, i, _) = dims(&mut r);
        let slope = r.random_range(0.05..0.95);
        let mut layer = LeakyRelu::new(slope).unwrap();
        let x = normal(b, i, &mut r).mapv(|v| if v.abs() < 1e-3 { v.signum() * 1e-3 + v } else { v });
        let w = normal(b, i, &mut r);
        gradient_check(&mut layer, &x, Pass::train(), &mut r, mixed_loss(&w), EPS).unwrap()
    })
}

pub fn dropout(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(400 + c);
        let (b, i, _) = dims(&mut r);
        let rate = r.random_range(0.0..0.8);
        let mut layer = Dropout::new(rate).unwrap();
        let x = normal(b, i, &mut r);
        let w = normal(b, i, &mut r);
        gradient_check(&mut layer, &x, Pass::train(), &mut r, mixed_loss(&w), EPS).unwrap()
    })
}

fn random_vardense(r: &mut Rng, i: usize, o: usize, log_var_shift: f64) -> VarDense {
    VarDense::new(VarDenseParams {
        weight_mean: normal(i, o, r),
        weight_log_var: normal(i, o, r) + log_var_shift,
        bias_mean: normal_vec(o, r),
        bias_log_var: normal_vec(o, r) + log_var_shift,
        prior_std: r.random_range(0.5..2.0),
    })
}

/// Sampled weights with frozen noise, then the mean-weight path.
pub fn probabilistic_dense(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(500 + c);
        let (b, i, o) = dims(&mut r);
        let mut layer = random_vardense(&mut r, i, o, -1.0);
        let x = normal(b, i, &mut r);
        let w = normal(b, o, &mut r);
        let sample = gradient_check(&mut layer, &x, Pass::train(), &mut r, mixed_loss(&w), EPS).unwrap();
        let mean = gradient_check(&mut layer, &x, Pass::infer(), &mut r, mixed_loss(&w), EPS).unwrap();
        sample.max(mean)
    })
}

pub fn probabilistic_dense_kl(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(550 + c);
        let (_, i, o) = dims(&mut r);
        let mut layer = random_vardense(&mut r, i, o, 0.0);
        check_gradients(&mut layer, EPS, 1e-6, |l, mode| {
            if mode == Eval::Analytic {
                l.zero_grad();
                l.add_kl_grad(1.0);
            }
            Ok(l.kl())
        })
        .unwrap()
        .max_rel_error
    })
}

/// Loss on `z` plus weighted KL, differentiated with respect to the raw
/// encoder outputs.
pub fn latent_head(kind: LatentKind, configs: u64) -> f64 {
    let offset = if kind == LatentKind::MeanField { 600 } else { 700 };
    worst(configs, |c| {
        let mut r = rng(offset + c);
        let b = r.random_range(1..5);
        let j = r.random_range(1..5);
        let mut head = LatentHead::new(kind, j);
        let params = normal(b, kind.param_width(j), &mut r) * 0.7;
        let w = normal(b, j, &mut r);
        let kl_weight = r.random_range(0.1..3.0);
        let loss = |head: &mut LatentHead, p: &Tensor2, pass: Pass, r: &mut Rng| {
            let out = head.forward(p, pass, r).unwrap();
            let (v, g) = mixed_loss(&w)(&out.z);
            (v + kl_weight * out.kl.sum(), g)
        };
        let (base, dz) = loss(&mut head, &params, Pass::train(), &mut r);
        let analytic = head.backward(&dz, kl_weight).unwrap();
        let mut err: f64 = 0.0;
        let mut p = params.clone();
        for idx in 0..p.len() {
            let orig = p.as_slice().unwrap()[idx];
            p.as_slice_mut().unwrap()[idx] = orig + EPS;
            let plus = loss(&mut head, &p, Pass::train().replaying(), &mut r).0;
            p.as_slice_mut().unwrap()[idx] = orig - EPS;
            let minus = loss(&mut head, &p, Pass::train().replaying(), &mut r).0;
            p.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let a = analytic.as_slice().unwrap()[idx];
            err = err.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6 * base.abs().max(1.0)));
        }
        err
    })
}

pub fn random_model_config(r: &mut Rng, seed: u64) -> ModelConfig {
    let width = |r: &mut Rng| r.random_range(2..6);
    ModelConfig {
        input_dim: r.random_range(2..6),
        latent_dim: r.random_range(1..4),
        encoder_widths: (0..r.random_range(1..4)).map(|_| width(r)).collect(),
        decoder_widths: (0..r.random_range(1..4)).map(|_| width(r)).collect(),
        regressor_widths: (0..r.random_range(1..4)).map(|_| width(r)).collect(),
        latent_kind: if r.random_bool(0.5) { LatentKind::MeanField } else { LatentKind::FullCov },
        layer_kind: if r.random_bool(0.5) { LayerKind::Deterministic } else { LayerKind::Probabilistic },
        beta: r.random_range(0.0..5.0),
        gamma: r.random_range(0.0..30.0),
        dropout_rate: r.random_range(0.0..0.4),
        weight_init_log_var: -2.0,
        beta_scales_weight_kl: r.random_bool(0.5),
        seed,
        ..ModelConfig::default()
    }
}

/// Whole-model joint loss, including the weight KL, over random architectures.
pub fn full_joint_loss(configs: u64) -> f64 {
    worst(configs, |c| {
        let mut r = rng(800 + c);
        let cfg = random_model_config(&mut r, c);
        let mut model = Model::from_config(&cfg).unwrap();
        let b = r.random_range(3..7);
        let x = normal(b, cfg.input_dim, &mut r);
        let y = normal_vec(b, &mut r);
        let n_train = 50;
        check_gradients(&mut model, EPS, 1e-6, |m, mode| match mode {
            Eval::Analytic => Ok(m.loss_and_backward(&x, &y, Pass::train(), &mut r, n_train)?.1),
            Eval::Replay => {
                let out = m.forward(&x, Pass::train().replaying(), &mut r)?;
                let l = joint_loss(&x, &out.reconstruction, &out.latent.kl, &y, &out.prediction, m.config.beta, m.config.gamma)?;
                Ok(l.total + m.weight_kl_scale(n_train) * m.weight_kl())
            }
        })
        .unwrap()
        .max_rel_error
    })
}
