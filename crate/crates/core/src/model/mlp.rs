use crate::bayes::VarDense;
use crate::error::Result;
use crate::nn::{BatchNorm, Dense, Dropout, Layer, LeakyRelu, ParamSlot, Parameters, Pass, Rng, Tensor2};

use super::{LayerKind, ModelConfig};

/// A dense map that is either deterministic or probabilistic.
#[derive(Clone, Debug)]
pub enum Linear {
    Deterministic(Dense),
    Probabilistic(VarDense),
}

impl Linear {
    pub fn build(inputs: usize, outputs: usize, config: &ModelConfig, rng: &mut Rng) -> Self {
        match config.layer_kind {
            LayerKind::Deterministic => Linear::Deterministic(Dense::he_init(inputs, outputs, rng)),
            LayerKind::Probabilistic => Linear::Probabilistic(VarDense::he_init(
                inputs,
                outputs,
                config.weight_init_log_var,
                config.weight_prior_std,
                rng,
            )),
        }
    }

    pub fn weight_kl(&self) -> f64 {
        match self {
            Linear::Deterministic(_) => 0.0,
            Linear::Probabilistic(l) => l.kl(),
        }
    }

    pub fn add_weight_kl_grad(&mut self, scale: f64) {
        if let Linear::Probabilistic(l) = self {
            l.add_kl_grad(scale);
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Linear::Deterministic(l) => l.params.outputs(),
            Linear::Probabilistic(l) => l.params.outputs(),
        }
    }

    /// Output bias (posterior mean for probabilistic layers).
    pub fn bias_mut(&mut self) -> &mut ndarray::Array1<f64> {
        match self {
            Linear::Deterministic(l) => &mut l.params.bias,
            Linear::Probabilistic(l) => &mut l.params.bias_mean,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor2 {
        match self {
            Linear::Deterministic(l) => &mut l.params.weights,
            Linear::Probabilistic(l) => &mut l.params.weight_mean,
        }
    }
}

impl Parameters for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        match self {
            Linear::Deterministic(l) => l.visit(prefix, f),
            Linear::Probabilistic(l) => l.visit(prefix, f),
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, input: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Tensor2> {
        match self {
            Linear::Deterministic(l) => l.forward(input, pass, rng),
            Linear::Probabilistic(l) => l.forward(input, pass, rng),
        }
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        match self {
            Linear::Deterministic(l) => l.backward(upstream),
            Linear::Probabilistic(l) => l.backward(upstream),
        }
    }
}

/// dense → batch norm → leaky ReLU → dropout.
#[derive(Clone, Debug)]
pub struct HiddenBlock {
    pub dense: Linear,
    pub norm: BatchNorm,
    pub act: LeakyRelu,
    pub dropout: Dropout,
}

impl Parameters for HiddenBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.dense.visit(&crate::nn::join_name(prefix, "dense"), f);
        self.norm.visit(&crate::nn::join_name(prefix, "norm"), f);
    }
}

impl Layer for HiddenBlock {
    fn forward(&mut self, input: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Tensor2> {
        let h = self.dense.forward(input, pass, rng)?;
        let h = self.norm.forward(&h, pass, rng)?;
        let h = self.act.forward(&h, pass, rng)?;
        self.dropout.forward(&h, pass, rng)
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let g = self.dropout.backward(upstream)?;
        let g = self.act.backward(&g)?;
        let g = self.norm.backward(&g)?;
        self.dense.backward(&g)
    }
}

/// Hidden blocks followed by a plain dense output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<HiddenBlock>,
    pub output: Linear,
}

impl Mlp {
    pub fn build(
        inputs: usize,
        widths: &[usize],
        outputs: usize,
        config: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut prev = inputs;
        for &w in widths {
            hidden.push(HiddenBlock {
                dense: Linear::build(prev, w, config, rng),
                norm: BatchNorm::new(w),
                act: LeakyRelu::new(config.leaky_slope)?,
                dropout: Dropout::new(config.dropout_rate)?,
            });
            prev = w;
        }
        Ok(Mlp {
            hidden,
            output: Linear::build(prev, outputs, config, rng),
        })
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.hidden
            .iter_mut()
            .map(|b| &mut b.dense)
            .chain(std::iter::once(&mut self.output))
    }

    pub fn weight_kl(&self) -> f64 {
        self.hidden
            .iter()
            .map(|b| b.dense.weight_kl())
            .sum::<f64>()
            + self.output.weight_kl()
    }
}

impl Parameters for Mlp {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_>)) {
        for (i, block) in self.hidden.iter_mut().enumerate() {
            block.visit(&crate::nn::join_name(prefix, &format!("hidden{i}")), f);
        }
        self.output.visit(&crate::nn::join_name(prefix, "output"), f);
    }
}

impl Layer for Mlp {
    fn forward(&mut self, input: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Tensor2> {
        let mut h = input.clone();
        for block in &mut self.hidden {
            h = block.forward(&h, pass, rng)?;
        }
        self.output.forward(&h, pass, rng)
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let mut g = self.output.backward(upstream)?;
        for block in self.hidden.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(g)
    }
}
