use rand::Rng as _;

use super::{Layer, ParamSlot, Parameters, Pass, Rng, Tensor2};
use crate::error::{Error, Result};

pub const DEFAULT_RATE: f64 = 0.1;

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )))
    }
}

/// Inverted dropout. When `active`, each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Returns the output and
/// the multiplicative mask that produced it.
pub fn dropout_apply(
    input: &Tensor2,
    rate: f64,
    active: bool,
    rng: &mut Rng,
) -> Result<(Tensor2, Tensor2)> {
    check_rate(rate)?;
    if !active || rate == 0.0 {
        return Ok((input.clone(), Tensor2::ones(input.raw_dim())));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask = Tensor2::from_shape_simple_fn(input.raw_dim(), || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            0.0
        }
    });
    Ok((input * &mask, mask))
}

#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Tensor2>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Dropout { rate, mask: None })
    }

    pub fn last_mask(&self) -> Option<&Tensor2> {
        self.mask.as_ref()
    }
}

impl Parameters for Dropout {
    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(ParamSlot<'_>)) {}
}

impl Layer for Dropout {
    fn forward(&mut self, input: &Tensor2, pass: Pass, rng: &mut Rng) -> Result<Tensor2> {
        if pass.replay {
            if let Some(mask) = &self.mask {
                if mask.dim() == input.dim() {
                    return Ok(input * mask);
                }
            }
        }
        let (out, mask) = dropout_apply(input, self.rate, pass.dropout, rng)?;
        self.mask = Some(mask);
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("dropout backward called before forward".into()))?;
        Ok(upstream * mask)
    }
}
