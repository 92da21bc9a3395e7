//! Probabilistic dense layer with factorized Gaussian weight posteriors.
//!
//! Every weight and bias carries its own `N(m, s²)`, stored as a mean and a
//! log-variance. A forward pass in sample mode draws one weight matrix,
//! shared by every row of the batch, via `W = m + exp(½ log s²) ⊙ ε`;
//! repeating the pass yields a predictive distribution.

use ndarray::{Array1, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{slot, Layer, ParamSlot, Parameters, Pass, Rng, Tensor2};

pub const WEIGHT_LOG_VAR_MIN: f64 = -60.0;
pub const WEIGHT_LOG_VAR_MAX: f64 = 10.0;
pub const DEFAULT_INIT_LOG_VAR: f64 = -6.0;
pub const DEFAULT_PRIOR_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VarDenseParams {
    pub weight_mean: Tensor2,
    pub weight_log_var: Tensor2,
    pub bias_mean: Array1<f64>,
    pub bias_log_var: Array1<f64>,
    pub prior_std: f64,
}

/// Standard-normal draws for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct VarNoise {
    pub weights: Tensor2,
    pub bias: Array1<f64>,
}

impl VarNoise {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        VarNoise {
            weights: Tensor2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn draw(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        VarNoise {
            weights: Tensor2::from_shape_simple_fn((inputs, outputs), || {
                StandardNormal.sample(rng)
            }),
            bias: Array1::from_shape_simple_fn(outputs, || StandardNormal.sample(rng)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarDenseGrads {
    pub weight_mean: Tensor2,
    pub weight_log_var: Tensor2,
    pub bias_mean: Array1<f64>,
    pub bias_log_var: Array1<f64>,
}

fn clamp_lv(v: f64) -> f64 {
    v.clamp(WEIGHT_LOG_VAR_MIN, WEIGHT_LOG_VAR_MAX)
}

fn in_clamp(v: f64) -> bool {
    (WEIGHT_LOG_VAR_MIN..=WEIGHT_LOG_VAR_MAX).contains(&v)
}

impl VarDenseParams {
    pub fn inputs(&self) -> usize {
        self.weight_mean.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight_mean.ncols()
    }

    fn check(&self) -> Result<()> {
        let (i, o) = self.weight_mean.dim();
        if self.weight_log_var.dim() != (i, o) {
            return Err(Error::shape("weight_log_var", &[i, o], self.weight_log_var.shape()));
        }
        if self.bias_mean.len() != o || self.bias_log_var.len() != o {
            return Err(Error::shape("bias posterior", &[o], &[self.bias_mean.len()]));
        }
        if !(self.prior_std > 0.0) {
            return Err(Error::Config(format!(
                "prior_std must be positive, got {}",
                self.prior_std
            )));
        }
        Ok(())
    }

    /// Weights and bias actually used by a pass with the given noise.
    pub fn realize(&self, noise: &VarNoise, mode: WeightMode) -> (Tensor2, Array1<f64>) {
        match mode {
            WeightMode::Mean => (self.weight_mean.clone(), self.bias_mean.clone()),
            WeightMode::Sample => {
                let mut w = self.weight_mean.clone();
                Zip::from(&mut w)
                    .and(&self.weight_log_var)
                    .and(&noise.weights)
                    .for_each(|w, &lv, &e| *w += (0.5 * clamp_lv(lv)).exp() * e);
                let mut b = self.bias_mean.clone();
                Zip::from(&mut b)
                    .and(&self.bias_log_var)
                    .and(&noise.bias)
                    .for_each(|b, &lv, &e| *b += (0.5 * clamp_lv(lv)).exp() * e);
                (w, b)
            }
        }
    }
}

pub fn vardense_apply(
    input: &Tensor2,
    params: &VarDenseParams,
    noise: &VarNoise,
    mode: WeightMode,
) -> Result<Tensor2> {
    params.check()?;
    if input.ncols() != params.inputs() {
        return Err(Error::shape(
            "probabilistic dense input",
            &[input.nrows(), params.inputs()],
            input.shape(),
        ));
    }
    if noise.weights.dim() != params.weight_mean.dim() || noise.bias.len() != params.outputs() {
        return Err(Error::shape(
            "probabilistic dense noise",
            params.weight_mean.shape(),
            noise.weights.shape(),
        ));
    }
    let (w, b) = params.realize(noise, mode);
    Ok(input.dot(&w) + &b)
}

/// `KL(N(m, s²) ‖ N(0, p²))` for one scalar.
pub fn scalar_gaussian_kl(mean: f64, log_var: f64, prior_std: f64) -> f64 {
    let lv = clamp_lv(log_var);
    let p2 = prior_std * prior_std;
    0.5 * (p2.ln() - lv) + (lv.exp() + mean * mean) / (2.0 * p2) - 0.5
}

/// Sum of per-scalar KL terms over every weight and bias.
pub fn vardense_kl(params: &VarDenseParams) -> f64 {
    let p = params.prior_std;
    let w: f64 = params
        .weight_mean
        .iter()
        .zip(params.weight_log_var.iter())
        .map(|(&m, &lv)| scalar_gaussian_kl(m, lv, p))
        .sum();
    let b: f64 = params
        .bias_mean
        .iter()
        .zip(params.bias_log_var.iter())
        .map(|(&m, &lv)| scalar_gaussian_kl(m, lv, p))
        .sum();
    w + b
}

/// Gradient of [`vardense_kl`] with respect to all four parameter blocks.
pub fn vardense_kl_grad(params: &VarDenseParams) -> VarDenseGrads {
    let p2 = params.prior_std * params.prior_std;
    let d_lv = |lv: f64| {
        if in_clamp(lv) {
            -0.5 + lv.exp() / (2.0 * p2)
        } else {
            0.0
        }
    };
    VarDenseGrads {
        weight_mean: params.weight_mean.mapv(|m| m / p2),
        weight_log_var: params.weight_log_var.mapv(d_lv),
        bias_mean: params.bias_mean.mapv(|m| m / p2),
        bias_log_var: params.bias_log_var.mapv(d_lv),
    }
}

/// Gradients of the data loss through the weight-reparameterization path.
/// `noise` must be the draw used by the forward pass.
pub fn vardense_backprop(
    input: &Tensor2,
    params: &VarDenseParams,
    noise: &VarNoise,
    mode: WeightMode,
    upstream: &Tensor2,
) -> Result<(Tensor2, VarDenseGrads)> {
    params.check()?;
    if upstream.dim() != (input.nrows(), params.outputs()) {
        return Err(Error::shape(
            "probabilistic dense upstream gradient",
            &[input.nrows(), params.outputs()],
            upstream.shape(),
        ));
    }
    let (w, _) = params.realize(noise, mode);
    let input_grad = upstream.dot(&w.t());
    let d_w = input.t().dot(upstream);
    let d_b = upstream.sum_axis(Axis(0));
    let (d_w_lv, d_b_lv) = match mode {
        WeightMode::Mean => (
            Tensor2::zeros(d_w.raw_dim()),
            Array1::zeros(d_b.len()),
        ),
        WeightMode::Sample => {
            let mut gw = d_w.clone();
            Zip::from(&mut gw)
                .and(&params.weight_log_var)
                .and(&noise.weights)
                .for_each(|g, &lv, &e| {
                    *g = if in_clamp(lv) {
                        *g * e * 0.5 * (0.5 * lv).exp()
                    } else {
                        0.0
                    }
                });
            let mut gb = d_b.clone();
            Zip::from(&mut gb)
                .and(&params.bias_log_var)
                .and(&noise.bias)
                .for_each(|g, &lv, &e| {
                    *g = if in_clamp(lv) {
                        *g * e * 0.5 * (0.5 * lv).exp()
                    } else {
                        0.0
                    }
                });
            (gw, gb)
        }
    };
    Ok((
        input_grad,
        VarDenseGrads {
            weight_mean: d_w,
            weight_log_var: d_w_lv,
            bias_mean: d_b,
            bias_log_var: d_b_lv,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct VarDense {
    pub params: VarDenseParams,
    grads: VarDenseGrads,
    input: Option<Tensor2>,
    noise: Option<VarNoise>,
    mode: WeightMode,
}

impl VarDense {
    pub fn new(params: VarDenseParams) -> Self {
        let grads = VarDenseGrads {
            weight_mean: Tensor2::zeros(params.weight_mean.raw_dim()),
            weight_log_var: Tensor2::zeros(params.weight_mean.raw_dim()),
            bias_mean: Array1::zeros(params.outputs()),
            bias_log_var: Array1::zeros(params.outputs()),
        };
        VarDense {
            params,
            grads,
            input: None,
            noise: None,
            mode: WeightMode::Mean,
        }
    }

    /// He-initialized means, constant initial log-variance.
    pub fn he_init(inputs: usize, outputs: usize, init_log_var: f64, prior_std: f64, rng: &mut Rng) -> Self {
        VarDense::new(VarDenseParams {
            weight_mean: crate::nn::he_uniform(inputs, outputs, rng),
            weight_log_var: Tensor2::from_elem((inputs, outputs), init_log_var),
            bias_mean: Array1::zeros(outputs),
            bias_log_var: Array1::from_elem(outputs, init_log_var),
            prior_std,
        })
    }

    pub fn kl(&self) -> f64 {
        vardense_kl(&self.params)
    }

    /// Adds `scale * ∂KL/∂θ` to the stored gradients.
    pub fn add_kl_grad(&mut self, scale: f64) {
        let g = vardense_kl_grad(&self.params);
        self.grads.weight_mean.scaled_add(scale, &g.weight_mean);
        self.grads.weight_log_var.scaled_add(scale, &g.weight_log_var);
        self.grads.bias_mean.scaled_add(scale, &g.bias_mean);
        self.grads.bias_log_var.scaled_add(scale, &g.bias_log_var);
    }

    pub fn grads(&self) -> &VarDenseGrads {
        &self.grads
    }
}

impl Parameters for VarDense {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(slot(
            prefix,
            "weight_mean",
            &mut self.params.weight_mean,
            Some(&mut self.grads.weight_mean),
        ));
        f(slot(
            prefix,
            "weight_log_var",
            &mut self.params.weight_log_var,
            Some(&mut self.grads.weight_log_var),
        ));
        f(slot(
            prefix,
            "bias_mean",
            &mut self.params.bias_mean,
            Some(&mut self.grads.bias_mean),
        ));
        f(slot(
            prefix,
            "bias_log_var",
            &mut self.params.bias_log_var,
            Some(&mut self.grads.bias_log_var),
        ));
    }
}

impl Layer for VarDense {
    fn forward(&mut self, input: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Tensor2> {
        let (i, o) = self.params.weight_mean.dim();
        let mode = if pass.sample_weights {
            WeightMode::Sample
        } else {
            WeightMode::Mean
        };
        let noise = match (&self.noise, pass.replay) {
            (Some(n), true) => n.clone(),
            _ if mode == WeightMode::Sample => VarNoise::draw(i, o, rng),
            _ => VarNoise::zeros(i, o),
        };
        let out = vardense_apply(input, &self.params, &noise, mode)?;
        self.input = Some(input.clone());
        self.noise = Some(noise);
        self.mode = mode;
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let (input, noise) = match (&self.input, &self.noise) {
            (Some(i), Some(n)) => (i, n),
            _ => {
                return Err(Error::Config(
                    "probabilistic dense backward called before forward".into(),
                ))
            }
        };
        let (dx, grads) = vardense_backprop(input, &self.params, noise, self.mode, upstream)?;
        self.grads = grads;
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn layer_1x1(m: f64, lv: f64, bm: f64, blv: f64) -> VarDenseParams {
        VarDenseParams {
            weight_mean: array![[m]],
            weight_log_var: array![[lv]],
            bias_mean: array![bm],
            bias_log_var: array![blv],
            prior_std: 1.0,
        }
    }

    #[test]
    fn zero_noise_equals_mean_mode() {
        let mut rng = Rng::seed_from_u64(3);
        let p = VarDense::he_init(3, 2, -1.0, 1.0, &mut rng).params;
        let x = array![[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let zero = VarNoise::zeros(3, 2);
        let a = vardense_apply(&x, &p, &zero, WeightMode::Sample).unwrap();
        let b = vardense_apply(&x, &p, &zero, WeightMode::Mean).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn floor_variance_collapses_to_deterministic() {
        let mut rng = Rng::seed_from_u64(3);
        let mut p = VarDense::he_init(4, 3, -1e9, 1.0, &mut rng).params;
        p.bias_mean = array![0.1, 0.2, 0.3];
        let x = array![[0.5, -1.0, 2.0, 0.0]];
        let noise = VarNoise::draw(4, 3, &mut rng);
        let s = vardense_apply(&x, &p, &noise, WeightMode::Sample).unwrap();
        let d = crate::nn::dense_apply(
            &x,
            &crate::nn::DenseParams {
                weights: p.weight_mean.clone(),
                bias: p.bias_mean.clone(),
            },
        )
        .unwrap();
        for (a, b) in s.iter().zip(d.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_reference_values() {
        let p = layer_1x1(0.0, 0.0, 0.0, 0.0);
        assert_eq!(vardense_kl(&p), 0.0);
        // weight m = 1, s = 1; bias at the prior.
        let p = layer_1x1(1.0, 0.0, 0.0, 0.0);
        assert!((vardense_kl(&p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_gradient_vanishes_at_zero_mean() {
        let p = layer_1x1(0.0, -2.0, 0.0, -2.0);
        let g = vardense_kl_grad(&p);
        assert_eq!(g.weight_mean[[0, 0]], 0.0);
        assert_eq!(g.bias_mean[0], 0.0);
    }

    #[test]
    fn zero_upstream_zero_param_grads() {
        let mut rng = Rng::seed_from_u64(1);
        let p = VarDense::he_init(2, 2, -1.0, 1.0, &mut rng).params;
        let noise = VarNoise::draw(2, 2, &mut rng);
        let x = array![[1.0, 2.0]];
        let (_, g) =
            vardense_backprop(&x, &p, &noise, WeightMode::Sample, &Tensor2::zeros((1, 2))).unwrap();
        assert!(g.weight_mean.iter().chain(g.weight_log_var.iter()).all(|v| *v == 0.0));
        assert!(g.bias_mean.iter().chain(g.bias_log_var.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn output_variance_matches_weight_and_bias_variance() {
        let (lv_w, lv_b) = (-0.5_f64, -1.2_f64);
        let p = layer_1x1(0.3, lv_w, -0.1, lv_b);
        let mut rng = Rng::seed_from_u64(11);
        let n = 10_000;
        let x = array![[1.0]];
        let ys: Vec<f64> = (0..n)
            .map(|_| {
                let noise = VarNoise::draw(1, 1, &mut rng);
                vardense_apply(&x, &p, &noise, WeightMode::Sample).unwrap()[[0, 0]]
            })
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = lv_w.exp() + lv_b.exp();
        // Output is Gaussian, so Var(s²) = 2σ⁴/(n-1).
        let se = (2.0 * expected * expected / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn kl_decreases_toward_prior() {
        let mut prev = f64::INFINITY;
        for m in [2.0, 1.5, 1.0, 0.5, 0.0] {
            let k = vardense_kl(&layer_1x1(m, -1.0, 0.0, 0.0));
            assert!(k < prev);
            prev = k;
        }
        let mut prev = f64::INFINITY;
        for lv in [-4.0, -3.0, -2.0, -1.0, 0.0] {
            let k = vardense_kl(&layer_1x1(0.0, lv, 0.0, 0.0));
            assert!(k < prev);
            prev = k;
        }
    }
}
