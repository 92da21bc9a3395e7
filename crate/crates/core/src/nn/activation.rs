use ndarray::Zip;

use super::{Layer, ParamSlot, Parameters, Pass, Rng, Tensor2};
use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.2;

pub fn leaky_relu(input: &Tensor2, slope: f64) -> Tensor2 {
    input.mapv(|x| if x >= 0.0 { x } else { slope * x })
}

pub fn leaky_relu_backprop(input: &Tensor2, slope: f64, upstream: &Tensor2) -> Tensor2 {
    let mut out = upstream.clone();
    Zip::from(&mut out).and(input).for_each(|g, &x| {
        if x < 0.0 {
            *g *= slope;
        }
    });
    out
}

#[derive(Clone, Debug)]
pub struct LeakyRelu {
    pub slope: f64,
    input: Option<Tensor2>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky relu slope must lie in (0, 1), got {slope}"
            )));
        }
        Ok(LeakyRelu { slope, input: None })
    }
}

impl Parameters for LeakyRelu {
    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(ParamSlot<'_>)) {}
}

impl Layer for LeakyRelu {
    fn forward(&mut self, input: &Tensor2, _pass: Pass, _rng: &mut Rng) -> Result<Tensor2> {
        self.input = Some(input.clone());
        Ok(leaky_relu(input, self.slope))
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("leaky relu backward called before forward".into()))?;
        Ok(leaky_relu_backprop(input, self.slope, upstream))
    }
}
