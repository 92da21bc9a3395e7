//! Finite-difference oracles for every hand-written backward pass.

mod common;

use bvae_surrogate::latent::LatentKind;
use bvae_surrogate::model::{LayerKind, Model, ModelConfig};
use bvae_surrogate::nn::{
    check_gradients, gradient_check, BatchNorm, Dense, DenseParams, Eval, Layer, LeakyRelu, Parameters, Pass,
    Tensor2,
};
use common::grad::{self, EPS};
use common::{mixed_loss, normal, normal_vec, rng};

const TOL: f64 = 1e-4;
const CONFIGS: u64 = 12;

#[test]
fn dense_layer() {
    assert_below(grad::dense(CONFIGS));
}

#[test]
fn batch_norm_train_and_infer() {
    assert_below(grad::batch_norm(CONFIGS));
}

#[test]
fn leaky_relu_away_from_kink() {
    assert_below(grad::leaky_relu(CONFIGS));
}

#[test]
fn dropout_with_frozen_mask() {
    assert_below(grad::dropout(CONFIGS));
}

#[test]
fn probabilistic_dense_with_frozen_noise() {
    assert_below(grad::probabilistic_dense(CONFIGS));
}

#[test]
fn probabilistic_dense_kl_gradient() {
    assert_below(grad::probabilistic_dense_kl(CONFIGS));
}

#[test]
fn meanfield_head() {
    assert_below(grad::latent_head(LatentKind::MeanField, CONFIGS));
}

#[test]
fn fullcov_head() {
    assert_below(grad::latent_head(LatentKind::FullCov, CONFIGS));
}

#[test]
fn full_joint_loss() {
    assert_below(grad::full_joint_loss(CONFIGS));
}

fn assert_below(err: f64) {
    assert!(err < TOL, "worst relative error {err}");
}

#[test]
fn linear_squared_loss_is_exact() {
    let mut r = rng(900);
    let mut layer = Dense::new(DenseParams {
        weights: normal(3, 2, &mut r),
        bias: normal_vec(2, &mut r),
    });
    let x = normal(4, 3, &mut r);
    let target = normal(4, 2, &mut r);
    let loss = |o: &Tensor2| {
        let d = o - &target;
        (0.5 * d.mapv(|v| v * v).sum(), d)
    };
    let err = gradient_check(&mut layer, &x, Pass::infer(), &mut r, loss, 1e-3).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut r = rng(901);
    let mut stack = (
        Dense::new(DenseParams { weights: normal(3, 4, &mut r), bias: normal_vec(4, &mut r) }),
        BatchNorm::new(4),
        LeakyRelu::new(0.2).unwrap(),
    );
    let x = normal(6, 3, &mut r);
    let w = normal(6, 4, &mut r);
    let run = |stack: &mut (Dense, BatchNorm, LeakyRelu), r: &mut bvae_surrogate::nn::Rng, corrupt: f64| {
        check_gradients(&mut stack.0, EPS, 1e-6, |d, mode| {
            let pass = if mode == Eval::Analytic { Pass::train() } else { Pass::train().replaying() };
            let h = d.forward(&x, pass, r)?;
            let h = stack.1.forward(&h, pass, r)?;
            let o = stack.2.forward(&h, pass, r)?;
            let (v, g) = mixed_loss(&w)(&o);
            if mode == Eval::Analytic {
                let g = stack.2.backward(&g)?;
                let g = stack.1.backward(&g)?;
                d.backward(&g)?;
                d.visit("", &mut |s| {
                    if let Some(g) = s.grad {
                        g.iter_mut().for_each(|v| *v *= corrupt);
                    }
                });
            }
            Ok(v)
        })
        .unwrap()
        .max_rel_error
    };
    assert!(run(&mut stack, &mut r, 1.0) < TOL);
    assert!(run(&mut stack, &mut r, 1.01) > 1e-3);
}

#[test]
fn zero_upstream_gives_zero_gradients_everywhere() {
    let mut r = rng(902);
    let cfg = ModelConfig {
        input_dim: 4,
        latent_dim: 2,
        encoder_widths: vec![5],
        decoder_widths: vec![5],
        regressor_widths: vec![3],
        layer_kind: LayerKind::Probabilistic,
        ..ModelConfig::default()
    };
    let mut m = Model::from_config(&cfg).unwrap();
    let x = normal(5, 4, &mut r);
    m.forward(&x, Pass::train(), &mut r).unwrap();
    m.regressor.backward(&Tensor2::zeros((5, 1))).unwrap();
    m.regressor.visit("", &mut |s| {
        if let Some(g) = s.grad {
            assert!(g.iter().all(|&v| v == 0.0), "{}", s.name);
        }
    });
}
