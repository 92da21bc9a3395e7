use std::time::Instant;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{joint_loss, JointLossBreakdown, LrSchedule, Model};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Pass, Tensor2};

/// Standardized training and validation arrays.
#[derive(Clone, Debug)]
pub struct TrainSplit {
    pub x_train: Tensor2,
    pub y_train: Array1<f64>,
    pub x_val: Tensor2,
    pub y_val: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train: JointLossBreakdown,
    pub validation: Option<JointLossBreakdown>,
    /// Unscaled weight-posterior KL after the epoch (0 for deterministic layers).
    pub weight_kl: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,learning_rate,train_reconstruction_mse,train_kl,train_regression_mse,train_total,\
             val_reconstruction_mse,val_kl,val_regression_mse,val_total,weight_kl\n",
        );
        for r in &self.epochs {
            let v = r.validation.unwrap_or(JointLossBreakdown {
                reconstruction_mse: f64::NAN,
                kl: f64::NAN,
                regression_mse: f64::NAN,
                total: f64::NAN,
            });
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.learning_rate,
                r.train.reconstruction_mse,
                r.train.kl,
                r.train.regression_mse,
                r.train.total,
                v.reconstruction_mse,
                v.kl,
                v.regression_mse,
                v.total,
                r.weight_kl
            ));
        }
        s
    }
}

pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.initial * schedule.decay_factor.powi((epoch / schedule.decay_every) as i32)
}

fn rows(x: &Tensor2, idx: &[usize]) -> Tensor2 {
    x.select(Axis(0), idx)
}

/// Deterministic evaluation of the joint loss: running statistics,
/// posterior-mean latent, no dropout.
pub fn evaluate_loss(model: &mut Model, x: &Tensor2, y: &Array1<f64>) -> Result<JointLossBreakdown> {
    let mut rng = crate::seed::stream(0, "eval", 0);
    let out = model.forward(x, Pass::infer(), &mut rng)?;
    joint_loss(
        x,
        &out.reconstruction,
        &out.latent.kl,
        y,
        &out.prediction,
        model.config.beta,
        model.config.gamma,
    )
}

/// Shuffled minibatch Adam on the joint loss for `model.config.epochs`
/// epochs. Batches smaller than 2 rows are skipped (batch norm needs two).
pub fn train(model: &mut Model, data: &TrainSplit) -> Result<TrainingHistory> {
    model.config.validate()?;
    let cfg = model.config.clone();
    let n = data.x_train.nrows();
    if data.y_train.len() != n {
        return Err(Error::shape("training targets", &[n], &[data.y_train.len()]));
    }
    if data.x_train.ncols() != cfg.input_dim {
        return Err(Error::shape(
            "training features",
            &[n, cfg.input_dim],
            data.x_train.shape(),
        ));
    }
    let mut history = TrainingHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 training rows, got {n}")));
    }

    let mut shuffle_rng = crate::seed::stream(cfg.seed, "shuffle", 0);
    let mut noise_rng = crate::seed::stream(cfg.seed, "train-noise", 0);
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..n).collect();
    let has_val = data.x_val.nrows() > 0;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.lr_schedule, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sums = JointLossBreakdown::default();
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let xb = rows(&data.x_train, chunk);
            let yb = data.y_train.select(Axis(0), chunk);
            let (loss, objective) =
                model.loss_and_backward(&xb, &yb, Pass::train(), &mut noise_rng, n)?;
            if !objective.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b}: {objective}"
                )));
            }
            adam.step(model, lr).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("{msg} (epoch {epoch}, batch {b})"))
                }
                other => other,
            })?;
            let w = chunk.len() as f64;
            sums.reconstruction_mse += w * loss.reconstruction_mse;
            sums.kl += w * loss.kl;
            sums.regression_mse += w * loss.regression_mse;
            sums.total += w * loss.total;
            seen += chunk.len();
        }
        let seen = seen.max(1) as f64;
        let train_loss = JointLossBreakdown {
            reconstruction_mse: sums.reconstruction_mse / seen,
            kl: sums.kl / seen,
            regression_mse: sums.regression_mse / seen,
            total: sums.total / seen,
        };
        let validation = if has_val {
            Some(evaluate_loss(model, &data.x_val, &data.y_val)?)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train: train_loss,
            validation,
            weight_kl: model.weight_kl(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: train total {:.5}, regression {:.5}",
            train_loss.total,
            train_loss.regression_mse
        );

        if let (Some(patience), Some(v)) = (cfg.early_stopping_patience, validation) {
            if v.total < best_val {
                best_val = v.total;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }
    model.trained = true;
    Ok(history)
}
