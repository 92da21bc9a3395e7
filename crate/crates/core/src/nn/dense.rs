use ndarray::{Array1, Axis};

use super::{slot, Layer, ParamSlot, Parameters, Pass, Rng, Tensor2};
use crate::error::{Error, Result};

/// Weights (`in x out`) and bias (`out`) of an affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor2,
    pub bias: Array1<f64>,
}

impl DenseParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseParams {
            weights: Tensor2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weights: Tensor2,
    pub bias: Array1<f64>,
}

fn check_shapes(input: &Tensor2, params: &DenseParams) -> Result<()> {
    if params.bias.len() != params.outputs() {
        return Err(Error::shape(
            "dense bias",
            &[params.outputs()],
            &[params.bias.len()],
        ));
    }
    if input.ncols() != params.inputs() {
        return Err(Error::shape(
            "dense input",
            &[input.nrows(), params.inputs()],
            input.shape(),
        ));
    }
    Ok(())
}

/// `output = input · weights + bias`.
pub fn dense_apply(input: &Tensor2, params: &DenseParams) -> Result<Tensor2> {
    check_shapes(input, params)?;
    let mut out = input.dot(&params.weights);
    out += &params.bias;
    Ok(out)
}

/// Returns `(input_grad, param_grads)` for an upstream gradient of the
/// layer output.
pub fn dense_backprop(
    input: &Tensor2,
    params: &DenseParams,
    upstream: &Tensor2,
) -> Result<(Tensor2, DenseGrads)> {
    check_shapes(input, params)?;
    if upstream.dim() != (input.nrows(), params.outputs()) {
        return Err(Error::shape(
            "dense upstream gradient",
            &[input.nrows(), params.outputs()],
            upstream.shape(),
        ));
    }
    let input_grad = upstream.dot(&params.weights.t());
    let weights = input.t().dot(upstream);
    let bias = upstream.sum_axis(Axis(0));
    Ok((input_grad, DenseGrads { weights, bias }))
}

/// Deterministic dense layer.
#[derive(Clone, Debug)]
pub struct Dense {
    pub params: DenseParams,
    grads: DenseGrads,
    input: Option<Tensor2>,
}

impl Dense {
    pub fn new(params: DenseParams) -> Self {
        let grads = DenseGrads {
            weights: Tensor2::zeros(params.weights.raw_dim()),
            bias: Array1::zeros(params.bias.len()),
        };
        Dense {
            params,
            grads,
            input: None,
        }
    }

    pub fn he_init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense::new(DenseParams {
            weights: super::he_uniform(inputs, outputs, rng),
            bias: Array1::zeros(outputs),
        })
    }

    pub fn grads(&self) -> &DenseGrads {
        &self.grads
    }
}

impl Parameters for Dense {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(slot(
            prefix,
            "weight",
            &mut self.params.weights,
            Some(&mut self.grads.weights),
        ));
        f(slot(
            prefix,
            "bias",
            &mut self.params.bias,
            Some(&mut self.grads.bias),
        ));
    }
}

impl Layer for Dense {
    fn forward(&mut self, input: &Tensor2, _pass: Pass, _rng: &mut Rng) -> Result<Tensor2> {
        let out = dense_apply(input, &self.params)?;
        self.input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("dense backward called before forward".into()))?;
        let (dx, grads) = dense_backprop(input, &self.params, upstream)?;
        self.grads = grads;
        Ok(dx)
    }
}
