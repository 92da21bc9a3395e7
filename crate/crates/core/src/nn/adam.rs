use super::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one flat parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based step number used for bias correction.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    step: u64,
    lr: f64,
    cfg: AdamConfig,
) {
    debug_assert_eq!(params.len(), grads.len());
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Adam over every trainable slot of a [`Parameters`] implementor, in visit
/// order.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub states: Vec<AdamState>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: Vec::new(),
            step_count: 0,
        }
    }

    /// Applies one update. Gradients are checked for finiteness before any
    /// parameter is touched.
    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        let mut bad: Option<String> = None;
        model.visit("", &mut |slot| {
            if bad.is_none() {
                if let Some(g) = &slot.grad {
                    if g.iter().any(|v| !v.is_finite()) {
                        bad = Some(slot.name.clone());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` at optimizer step {}",
                self.step_count + 1
            )));
        }

        self.step_count += 1;
        let step = self.step_count;
        let cfg = self.config;
        let states = &mut self.states;
        let mut idx = 0;
        model.visit("", &mut |slot| {
            if let Some(g) = slot.grad {
                if states.len() <= idx {
                    states.push(AdamState::new(slot.value.len()));
                }
                adam_update(slot.value, g, &mut states[idx], step, lr, cfg);
                idx += 1;
            }
        });
        Ok(())
    }
}
