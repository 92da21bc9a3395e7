//! β-VAE regression model.
//!
//! ```text
//!            ┌──────────┐  posterior  ┌────────┐  z  ┌──────────┐
//!   x ──────▶│ encoder  │────────────▶│ latent │──┬─▶│ decoder  │──▶ x̂
//!            └──────────┘   params    │  head  │  │  └──────────┘
//!                                     └────────┘  │  ┌──────────┐
//!                                                 └─▶│regressor │──▶ ŷ
//!                                                    └──────────┘
//! ```
//!
//! The three subnetworks are trained jointly on
//! `MSE(x, x̂) + β·KL(q(z|x) ‖ N(0, I)) + γ·MSE(y, ŷ)`.

mod mlp;
mod train;

pub use mlp::{HiddenBlock, Linear, Mlp};
pub use train::{evaluate_loss, lr_at_epoch, train, EpochRecord, TrainSplit, TrainingHistory};

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Normalization;
use crate::latent::{batch_kl, LatentHead, LatentKind, LatentOutput};
use crate::nn::{Layer, ParamSlot, Parameters, Pass, Rng, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Deterministic,
    Probabilistic,
}

/// Step decay: `initial * decay_factor^(epoch / decay_every)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            decay_factor: 0.5,
            decay_every: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub regressor_widths: Vec<usize>,
    pub latent_kind: LatentKind,
    pub layer_kind: LayerKind,
    pub beta: f64,
    pub gamma: f64,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Stop when validation total loss has not improved for this many epochs.
    pub early_stopping_patience: Option<usize>,
    pub weight_prior_std: f64,
    pub weight_init_log_var: f64,
    /// Also scale the weight-KL term by β (probabilistic layers only).
    pub beta_scales_weight_kl: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: crate::field::DECISION_DIM,
            latent_dim: crate::field::DECISION_DIM,
            encoder_widths: vec![128, 96, 64],
            decoder_widths: vec![64, 96, 128],
            regressor_widths: vec![64, 32, 16],
            latent_kind: LatentKind::MeanField,
            layer_kind: LayerKind::Deterministic,
            beta: 1.0,
            gamma: 25.0,
            dropout_rate: crate::nn::DEFAULT_DROPOUT_RATE,
            leaky_slope: crate::nn::DEFAULT_LEAKY_SLOPE,
            epochs: 1500,
            batch_size: 256,
            lr_schedule: LrSchedule::default(),
            early_stopping_patience: None,
            weight_prior_std: crate::bayes::DEFAULT_PRIOR_STD,
            weight_init_log_var: crate::bayes::DEFAULT_INIT_LOG_VAR,
            beta_scales_weight_kl: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("input_dim and latent_dim must be >= 1".into());
        }
        for (name, widths) in [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("regressor_widths", &self.regressor_widths),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return bad(format!("{name} must be non-empty with every width >= 1"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for batch normalization".into());
        }
        let lr = &self.lr_schedule;
        if !(lr.initial > 0.0) || !(lr.decay_factor > 0.0) || lr.decay_every == 0 {
            return bad("lr_schedule needs initial > 0, decay_factor > 0, decay_every >= 1".into());
        }
        if !(self.weight_prior_std > 0.0) {
            return bad("weight_prior_std must be > 0".into());
        }
        Ok(())
    }

    pub fn encoder_output_width(&self) -> usize {
        self.latent_kind.param_width(self.latent_dim)
    }
}

/// The three terms of the joint objective and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointLossBreakdown {
    pub reconstruction_mse: f64,
    pub kl: f64,
    pub regression_mse: f64,
    pub total: f64,
}

/// Reconstruction MSE averages over batch and features, KL averages the
/// per-sample sums over the batch, regression MSE averages over the batch.
pub fn joint_loss(
    x: &Tensor2,
    x_hat: &Tensor2,
    kl_per_sample: &Array1<f64>,
    y: &Array1<f64>,
    y_hat: &Array1<f64>,
    beta: f64,
    gamma: f64,
) -> Result<JointLossBreakdown> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape("reconstruction", x.shape(), x_hat.shape()));
    }
    if y.len() != y_hat.len() || y.len() != x.nrows() || kl_per_sample.len() != x.nrows() {
        return Err(Error::shape(
            "joint loss batch",
            &[x.nrows()],
            &[y.len(), y_hat.len(), kl_per_sample.len()],
        ));
    }
    let reconstruction_mse = (x - x_hat).mapv(|d| d * d).mean().unwrap_or(0.0);
    let kl = batch_kl(kl_per_sample);
    let regression_mse = (y - y_hat).mapv(|d| d * d).mean().unwrap_or(0.0);
    Ok(JointLossBreakdown {
        reconstruction_mse,
        kl,
        regression_mse,
        total: reconstruction_mse + beta * kl + gamma * regression_mse,
    })
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub reconstruction: Tensor2,
    pub posterior_params: Tensor2,
    pub latent: LatentOutput,
    pub prediction: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub head: LatentHead,
    pub decoder: Mlp,
    pub regressor: Mlp,
    /// Statistics used to standardize inputs and targets for this model.
    pub normalization: Option<Normalization>,
    pub trained: bool,
}

impl Model {
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let j = config.latent_dim;
        let encoder = Mlp::build(
            config.input_dim,
            &config.encoder_widths,
            config.encoder_output_width(),
            config,
            rng,
        )?;
        let decoder = Mlp::build(j, &config.decoder_widths, config.input_dim, config, rng)?;
        let regressor = Mlp::build(j, &config.regressor_widths, 1, config, rng)?;
        Ok(Model {
            config: config.clone(),
            encoder,
            head: LatentHead::new(config.latent_kind, j),
            decoder,
            regressor,
            normalization: None,
            trained: false,
        })
    }

    /// Builds with parameters initialized from `config.seed`.
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        let mut rng = crate::seed::stream(config.seed, "init", 0);
        Model::build(config, &mut rng)
    }

    pub fn forward(&mut self, batch: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<ForwardOutput> {
        if batch.ncols() != self.config.input_dim {
            return Err(Error::shape(
                "model input",
                &[batch.nrows(), self.config.input_dim],
                batch.shape(),
            ));
        }
        crate::nn::ensure_finite(batch, "model input")?;
        let posterior_params = self.encoder.forward(batch, pass, rng)?;
        let latent = self.head.forward(&posterior_params, pass, rng)?;
        let reconstruction = self.decoder.forward(&latent.z, pass, rng)?;
        let prediction = self
            .regressor
            .forward(&latent.z, pass, rng)?
            .index_axis_move(Axis(1), 0);
        Ok(ForwardOutput {
            reconstruction,
            posterior_params,
            latent,
            prediction,
        })
    }

    /// Sum of the weight-posterior KL over every probabilistic layer.
    pub fn weight_kl(&self) -> f64 {
        self.encoder.weight_kl() + self.decoder.weight_kl() + self.regressor.weight_kl()
    }

    /// Coefficient of the weight-KL term in the training objective for a
    /// training set of `n_train` samples.
    pub fn weight_kl_scale(&self, n_train: usize) -> f64 {
        match self.config.layer_kind {
            LayerKind::Deterministic => 0.0,
            LayerKind::Probabilistic => {
                let b = if self.config.beta_scales_weight_kl {
                    self.config.beta
                } else {
                    1.0
                };
                b / n_train.max(1) as f64
            }
        }
    }

    /// Forward pass, joint loss, and full backward pass. Afterwards every
    /// trainable slot holds the gradient of
    /// `total + weight_kl_scale · weight_kl`, which is also returned as the
    /// second element.
    pub fn loss_and_backward(
        &mut self,
        x: &Tensor2,
        y: &Array1<f64>,
        pass: Pass,
        rng: &mut Rng,
        n_train: usize,
    ) -> Result<(JointLossBreakdown, f64)> {
        let out = self.forward(x, pass, rng)?;
        let (beta, gamma) = (self.config.beta, self.config.gamma);
        let loss = joint_loss(
            x,
            &out.reconstruction,
            &out.latent.kl,
            y,
            &out.prediction,
            beta,
            gamma,
        )?;
        let b = x.nrows() as f64;
        let d = x.ncols() as f64;

        let d_recon = (&out.reconstruction - x) * (2.0 / (b * d));
        let d_pred = ((&out.prediction - y) * (2.0 * gamma / b)).insert_axis(Axis(1));
        let dz = self.decoder.backward(&d_recon)? + self.regressor.backward(&d_pred)?;
        let d_post = self.head.backward(&dz, beta / b)?;
        self.encoder.backward(&d_post)?;

        let scale = self.weight_kl_scale(n_train);
        let mut objective = loss.total;
        if scale > 0.0 {
            objective += scale * self.weight_kl();
            for net in [&mut self.encoder, &mut self.decoder, &mut self.regressor] {
                for lin in net.linears_mut() {
                    lin.add_weight_kl_grad(scale);
                }
            }
        }
        Ok((loss, objective))
    }

    /// Encoder, latent head and regressor only; the decoder is skipped.
    pub fn predict_pass(&mut self, x: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Array1<f64>> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::shape(
                "model input",
                &[x.nrows(), self.config.input_dim],
                x.shape(),
            ));
        }
        crate::nn::ensure_finite(x, "model input")?;
        let params = self.encoder.forward(x, pass, rng)?;
        let latent = self.head.forward(&params, pass, rng)?;
        Ok(self
            .regressor
            .forward(&latent.z, pass, rng)?
            .index_axis_move(Axis(1), 0))
    }

    /// Stochastic paths used for Monte Carlo prediction: dropout for
    /// deterministic models; dropout, weight and latent sampling for
    /// probabilistic ones. Batch norm always uses running statistics.
    pub fn mc_pass(&self) -> Pass {
        match self.config.layer_kind {
            LayerKind::Deterministic => Pass {
                sample_weights: false,
                sample_latent: false,
                ..Pass::monte_carlo()
            },
            LayerKind::Probabilistic => Pass::monte_carlo(),
        }
    }

    /// Point prediction: running batch-norm statistics, no dropout, mean
    /// weights, posterior-mean latent. Inputs are already standardized.
    pub fn predict(&mut self, x: &Tensor2) -> Result<Array1<f64>> {
        let mut rng = Rng::seed_from_u64(0);
        self.predict_pass(x, Pass::infer(), &mut rng)
    }

    /// Posterior means for standardized inputs.
    pub fn embed(&mut self, x: &Tensor2) -> Result<Tensor2> {
        let mut rng = Rng::seed_from_u64(0);
        let params = self.encoder.forward(x, Pass::infer(), &mut rng)?;
        Ok(self.head.forward(&params, Pass::infer(), &mut rng)?.mean)
    }

    /// Reconstruction of standardized inputs through the posterior mean.
    pub fn reconstruct(&mut self, x: &Tensor2) -> Result<Tensor2> {
        let mut rng = Rng::seed_from_u64(0);
        Ok(self.forward(x, Pass::infer(), &mut rng)?.reconstruction)
    }

    /// Every named tensor, trainable or not, in a fixed order.
    pub fn tensors(&mut self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |slot| out.push((slot.name, slot.shape, slot.value.to_vec())));
        out
    }
}

impl Parameters for Model {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.encoder.visit(&crate::nn::join_name(prefix, "encoder"), f);
        self.decoder.visit(&crate::nn::join_name(prefix, "decoder"), f);
        self.regressor.visit(&crate::nn::join_name(prefix, "regressor"), f);
    }
}
