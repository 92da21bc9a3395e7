use ndarray::{Array1, Axis};

use super::{slot, Layer, ParamSlot, Parameters, Pass, Rng, Tensor2};
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics only.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight of the previous running value in the moving average.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn new(width: usize) -> Self {
        BatchNormParams {
            scale: Array1::ones(width),
            shift: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Tensor2,
    pub inv_std: Array1<f64>,
    pub mode: BnMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

/// Standardizes each column and applies `scale`/`shift`.
///
/// Train mode uses the biased batch variance and folds the batch moments into
/// the running statistics as `running = momentum * running + (1 - momentum) * batch`.
pub fn batchnorm_apply(
    input: &Tensor2,
    params: &mut BatchNormParams,
    mode: BnMode,
) -> Result<(Tensor2, BatchNormCache)> {
    if input.ncols() != params.width() {
        return Err(Error::shape(
            "batch norm input",
            &[input.nrows(), params.width()],
            input.shape(),
        ));
    }
    let (mean, var) = match mode {
        BnMode::Train => {
            let rows = input.nrows();
            if rows < 2 {
                return Err(Error::DegenerateBatch(rows));
            }
            let mean = input.mean_axis(Axis(0)).expect("rows >= 2");
            let var = input.var_axis(Axis(0), 0.0);
            let m = params.momentum;
            params.running_mean = &params.running_mean * m + &mean * (1.0 - m);
            params.running_var = &params.running_var * m + &var * (1.0 - m);
            (mean, var)
        }
        BnMode::Infer => (params.running_mean.clone(), params.running_var.clone()),
    };
    let inv_std = var.mapv(|v| 1.0 / (v.max(0.0) + params.epsilon).sqrt());
    let normalized = (input - &mean) * &inv_std;
    let out = &normalized * &params.scale + &params.shift;
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mode,
        },
    ))
}

/// Exact gradient of batch normalization. In train mode this includes the
/// dependence of the batch mean and variance on every input row.
pub fn batchnorm_backprop(
    cache: &BatchNormCache,
    params: &BatchNormParams,
    upstream: &Tensor2,
) -> Result<(Tensor2, BatchNormGrads)> {
    if upstream.dim() != cache.normalized.dim() {
        return Err(Error::shape(
            "batch norm upstream gradient",
            cache.normalized.shape(),
            upstream.shape(),
        ));
    }
    let grads = BatchNormGrads {
        scale: (upstream * &cache.normalized).sum_axis(Axis(0)),
        shift: upstream.sum_axis(Axis(0)),
    };
    let d_norm = upstream * &params.scale;
    let dx = match cache.mode {
        BnMode::Infer => d_norm * &cache.inv_std,
        BnMode::Train => {
            let n = upstream.nrows() as f64;
            let sum_d = d_norm.sum_axis(Axis(0));
            let sum_dx_hat = (&d_norm * &cache.normalized).sum_axis(Axis(0));
            let centered = &d_norm * n - &sum_d - &cache.normalized * &sum_dx_hat;
            centered * &(&cache.inv_std / n)
        }
    };
    Ok((dx, grads))
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub params: BatchNormParams,
    grads: BatchNormGrads,
    cache: Option<BatchNormCache>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            params: BatchNormParams::new(width),
            grads: BatchNormGrads {
                scale: Array1::zeros(width),
                shift: Array1::zeros(width),
            },
            cache: None,
        }
    }
}

impl Parameters for BatchNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(slot(
            prefix,
            "scale",
            &mut self.params.scale,
            Some(&mut self.grads.scale),
        ));
        f(slot(
            prefix,
            "shift",
            &mut self.params.shift,
            Some(&mut self.grads.shift),
        ));
        f(slot(prefix, "running_mean", &mut self.params.running_mean, None));
        f(slot(prefix, "running_var", &mut self.params.running_var, None));
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, input: &Tensor2, pass: Pass, _rng: &mut Rng) -> Result<Tensor2> {
        let mode = if pass.batch_stats {
            BnMode::Train
        } else {
            BnMode::Infer
        };
        let (out, cache) = batchnorm_apply(input, &mut self.params, mode)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("batch norm backward called before forward".into()))?;
        let (dx, grads) = batchnorm_backprop(cache, &self.params, upstream)?;
        self.grads = grads;
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn standardized_column_stays_standardized() {
        let col = array![-1.5, -0.5, 0.5, 1.5];
        let mean = col.mean().unwrap();
        let sd = col.var(0.0_f64).sqrt();
        let x = Array2::from_shape_fn((4, 1), |(i, _)| (col[i] - mean) / sd);
        let mut p = BatchNormParams::new(1);
        let (y, _) = batchnorm_apply(&x, &mut p, BnMode::Train).unwrap();
        let m = y.column(0).mean().unwrap();
        let v = y.column(0).var(0.0);
        assert!(m.abs() < 1e-12);
        // var(y) = 1 / (1 + eps)
        assert!((v - 1.0 / (1.0 + p.epsilon)).abs() < 1e-12);
    }

    #[test]
    fn constant_column_maps_to_shift() {
        let x = Array2::from_elem((5, 2), 3.25);
        let mut p = BatchNormParams::new(2);
        p.shift = array![0.7, -2.0];
        let (y, _) = batchnorm_apply(&x, &mut p, BnMode::Train).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![0.7, -2.0]);
        }
    }

    #[test]
    fn infer_mode_formula() {
        let mut p = BatchNormParams::new(1);
        p.scale = array![2.0];
        p.shift = array![1.0];
        p.epsilon = 0.0;
        let (y, _) = batchnorm_apply(&array![[0.5]], &mut p, BnMode::Infer).unwrap();
        assert_eq!(y[[0, 0]], 2.0);
    }

    #[test]
    fn single_row_train_batch_rejected() {
        let mut p = BatchNormParams::new(3);
        let err = batchnorm_apply(&Array2::zeros((1, 3)), &mut p, BnMode::Train).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
    }

    #[test]
    fn running_stats_follow_moving_average() {
        let mut p = BatchNormParams::new(1);
        let x = array![[1.0], [3.0]];
        batchnorm_apply(&x, &mut p, BnMode::Train).unwrap();
        assert!((p.running_mean[0] - 0.02).abs() < 1e-15);
        assert!((p.running_var[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_kills_input_gradient() {
        let mut p = BatchNormParams::new(2);
        p.scale = array![0.0, 0.0];
        let x = array![[1.0, 2.0], [0.0, -1.0], [4.0, 0.5]];
        let (_, cache) = batchnorm_apply(&x, &mut p, BnMode::Train).unwrap();
        let up = array![[1.0, -1.0], [0.3, 2.0], [5.0, 0.1]];
        let (dx, _) = batchnorm_backprop(&cache, &p, &up).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_gradient_sums_to_zero_over_batch() {
        let mut p = BatchNormParams::new(2);
        p.scale = array![1.3, -0.4];
        let x = array![[1.0, 2.0], [0.0, -1.0], [4.0, 0.5], [2.2, 0.9]];
        let (_, cache) = batchnorm_apply(&x, &mut p, BnMode::Train).unwrap();
        let up = array![[1.0, -1.0], [0.3, 2.0], [5.0, 0.1], [-0.7, 0.25]];
        let (dx, _) = batchnorm_backprop(&cache, &p, &up).unwrap();
        for s in dx.sum_axis(Axis(0)) {
            assert!(s.abs() < 1e-12, "column sum {s}");
        }
    }
}
