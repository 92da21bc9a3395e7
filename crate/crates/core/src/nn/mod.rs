//! Minimal differentiable layer engine.
//!
//! Every layer exposes a pure forward function, a hand-derived backward
//! function, and a stateful wrapper implementing [`Layer`] that caches what
//! the backward pass needs. Networks in this crate have a fixed topology, so
//! there is no tape or graph: the model calls `backward` on its layers in
//! reverse order.
//!
//! All arithmetic is `f64`.

mod activation;
mod adam;
mod batchnorm;
mod dense;
mod dropout;
mod gradcheck;

pub use activation::{leaky_relu, leaky_relu_backprop, LeakyRelu, DEFAULT_SLOPE as DEFAULT_LEAKY_SLOPE};
pub use adam::{adam_update, Adam, AdamConfig, AdamState};
pub use batchnorm::{
    batchnorm_apply, batchnorm_backprop, BatchNorm, BatchNormCache, BatchNormGrads,
    BatchNormParams, BnMode,
};
pub use dense::{dense_apply, dense_backprop, Dense, DenseGrads, DenseParams};
pub use dropout::{dropout_apply, Dropout, DEFAULT_RATE as DEFAULT_DROPOUT_RATE};
pub use gradcheck::{check_gradients, gradient_check, Eval, GradCheckReport};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major batch of activations: `rows` samples by `cols` features.
pub type Tensor2 = Array2<f64>;

/// Seeded random stream used for every stochastic draw.
pub type Rng = ChaCha8Rng;

/// Selects the behaviour of stochastic and batch-dependent layers for one
/// forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Batch norm standardizes with batch statistics and updates running stats.
    pub batch_stats: bool,
    /// Dropout masks are drawn and applied.
    pub dropout: bool,
    /// Probabilistic layers draw weights instead of using posterior means.
    pub sample_weights: bool,
    /// The latent head samples `z` instead of returning the posterior mean.
    pub sample_latent: bool,
    /// Stochastic layers reuse the draws of the previous forward pass.
    pub replay: bool,
}

impl Pass {
    pub const fn train() -> Self {
        Pass {
            batch_stats: true,
            dropout: true,
            sample_weights: true,
            sample_latent: true,
            replay: false,
        }
    }

    /// Deterministic inference: running statistics, no dropout, mean weights,
    /// posterior-mean latent.
    pub const fn infer() -> Self {
        Pass {
            batch_stats: false,
            dropout: false,
            sample_weights: false,
            sample_latent: false,
            replay: false,
        }
    }

    /// Monte Carlo prediction: running statistics but every stochastic path on.
    pub const fn monte_carlo() -> Self {
        Pass {
            batch_stats: false,
            dropout: true,
            sample_weights: true,
            sample_latent: true,
            replay: false,
        }
    }

    pub const fn replaying(self) -> Self {
        Pass {
            replay: true,
            ..self
        }
    }
}

/// Mutable view of one named tensor owned by a layer.
///
/// `grad` is `None` for non-trainable buffers such as batch-norm running
/// statistics; they are checkpointed but never touched by the optimizer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: Option<&'a mut [f64]>,
}

/// Anything that owns named tensors.
pub trait Parameters {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                g.fill(0.0);
            }
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |slot| {
            if slot.grad.is_some() {
                n += slot.value.len();
            }
        });
        n
    }
}

pub trait Layer: Parameters {
    fn forward(&mut self, input: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Tensor2>;

    /// Consumes the upstream gradient of the most recent forward pass and
    /// returns the input gradient. Parameter gradients are overwritten.
    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2>;
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn slot<'a, D: ndarray::Dimension>(
    prefix: &str,
    name: &str,
    value: &'a mut ndarray::Array<f64, D>,
    grad: Option<&'a mut ndarray::Array<f64, D>>,
) -> ParamSlot<'a> {
    let shape = value.shape().to_vec();
    ParamSlot {
        name: join_name(prefix, name),
        shape,
        value: value
            .as_slice_mut()
            .expect("parameter tensors are kept in standard layout"),
        grad: grad.map(|g| g.as_slice_mut().expect("standard layout")),
    }
}

pub(crate) fn ensure_finite(t: &Tensor2, what: &str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// He-style uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor2 {
    use rand::Rng as _;
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}
