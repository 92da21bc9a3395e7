//! Central finite-difference verification of analytic gradients.

use super::{Layer, Parameters, Pass, Rng, Tensor2};
use crate::error::Result;

/// What the evaluation closure passed to [`check_gradients`] must do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eval {
    /// Forward with fresh stochastic draws, then backward so every slot's
    /// gradient holds the analytic gradient of the returned loss.
    Analytic,
    /// Forward only, replaying the draws of the analytic pass.
    Replay,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Slot name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error between an analytic and a numeric derivative, with `floor`
/// guarding entries whose true value is ~0.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every trainable entry of `target` against a central difference
/// with step `epsilon`.
///
/// `floor` is relative to the loss magnitude: derivatives smaller than
/// `floor * max(1, |loss|)` are compared in absolute terms, since a central
/// difference cannot resolve them below rounding noise.
pub fn check_gradients<T: Parameters + ?Sized>(
    target: &mut T,
    epsilon: f64,
    floor: f64,
    mut eval: impl FnMut(&mut T, Eval) -> Result<f64>,
) -> Result<GradCheckReport> {
    let base = eval(target, Eval::Analytic)?;
    let floor = floor * base.abs().max(1.0);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    target.visit("", &mut |slot| {
        if let Some(g) = slot.grad {
            analytic.push((slot.name, g.to_vec()));
        }
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (slot_idx, (name, grads)) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let plus = perturbed(target, slot_idx, k, epsilon, &mut eval)?;
            let minus = perturbed(target, slot_idx, k, -epsilon, &mut eval)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

fn perturbed<T: Parameters + ?Sized>(
    target: &mut T,
    slot_idx: usize,
    k: usize,
    delta: f64,
    eval: &mut impl FnMut(&mut T, Eval) -> Result<f64>,
) -> Result<f64> {
    nudge(target, slot_idx, k, delta);
    let out = eval(target, Eval::Replay);
    nudge(target, slot_idx, k, -delta);
    out
}

fn nudge<T: Parameters + ?Sized>(target: &mut T, slot_idx: usize, k: usize, delta: f64) {
    let mut idx = 0;
    target.visit("", &mut |slot| {
        if slot.grad.is_some() {
            if idx == slot_idx {
                slot.value[k] += delta;
            }
            idx += 1;
        }
    });
}

/// Loss-relative floor used by [`gradient_check`].
pub const FLOOR: f64 = 1e-6;

/// Gradient check of a single layer under a scalar loss of its output.
///
/// `loss` returns the loss value and its gradient with respect to the layer
/// output. Input gradients are checked as well as parameter gradients.
pub fn gradient_check<L, F>(
    layer: &mut L,
    input: &Tensor2,
    pass: Pass,
    rng: &mut Rng,
    loss: F,
    epsilon: f64,
) -> Result<f64>
where
    L: Layer,
    F: Fn(&Tensor2) -> (f64, Tensor2),
{
    let report = check_gradients(layer, epsilon, FLOOR, |layer, mode| {
        let p = match mode {
            Eval::Analytic => pass,
            Eval::Replay => pass.replaying(),
        };
        let out = layer.forward(input, p, rng)?;
        let (value, grad) = loss(&out);
        if mode == Eval::Analytic {
            layer.backward(&grad)?;
        }
        Ok(value)
    })?;

    // Input gradient.
    let out = layer.forward(input, pass.replaying(), rng)?;
    let (base, grad) = loss(&out);
    let floor = FLOOR * base.abs().max(1.0);
    let dx: Vec<f64> = layer.backward(&grad)?.iter().copied().collect();
    let mut worst = report.max_rel_error;
    let mut x = input.as_standard_layout().into_owned();
    for idx in 0..x.len() {
        let orig = x.as_slice().expect("standard layout")[idx];
        x.as_slice_mut().expect("standard layout")[idx] = orig + epsilon;
        let plus = loss(&layer.forward(&x, pass.replaying(), rng)?).0;
        x.as_slice_mut().expect("standard layout")[idx] = orig - epsilon;
        let minus = loss(&layer.forward(&x, pass.replaying(), rng)?).0;
        x.as_slice_mut().expect("standard layout")[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = dx[idx];
        worst = worst.max(relative_error(analytic, numeric, floor));
    }
    Ok(worst)
}
