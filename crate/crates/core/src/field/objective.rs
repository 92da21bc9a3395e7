use serde::{Deserialize, Serialize};

use super::{FluidVolumes, NEW_WELLS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Wcf,
    Npv,
}

/// Weighted cumulative fluid: `Q_op − 0.1 (Q_wp + Q_wi)`.
pub fn wcf(v: &FluidVolumes) -> f64 {
    // Distributed form, so the NPV reduction reproduces it bit for bit.
    v.total_oil() - 0.1 * v.total_water_produced() - 0.1 * v.total_water_injected()
}

/// Prices, discount rates and drilling cash flows for the NPV objective.
///
/// Components are ordered oil, produced water, injected water. Costs carry a
/// negative sign, including the drilling cash flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicParams {
    pub prices: Vec<f64>,
    /// Per-period discount rate of each component.
    pub discounts: Vec<f64>,
    /// One signed cash flow per drilled well.
    pub drilling: Vec<f64>,
}

impl Default for EconomicParams {
    fn default() -> Self {
        EconomicParams {
            prices: vec![45.0, -3.0, -3.0],
            discounts: vec![0.08; 3],
            drilling: vec![-8e6; NEW_WELLS],
        }
    }
}

impl EconomicParams {
    /// Settings under which NPV reduces to WCF.
    pub fn wcf_equivalent() -> Self {
        EconomicParams {
            prices: vec![1.0, -0.1, -0.1],
            discounts: vec![0.0; 3],
            drilling: vec![0.0; NEW_WELLS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prices.len() != self.discounts.len() {
            return Err(Error::Config(format!(
                "{} prices but {} discount rates",
                self.prices.len(),
                self.discounts.len()
            )));
        }
        if self.discounts.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("discount rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// `Σ_f Σ_τ Q[f][τ] C_f / (1 + d_f)^τ + Σ_i D_i` with `τ` counted from 0.
pub fn npv_from_table(volumes: &[Vec<f64>], econ: &EconomicParams) -> Result<f64> {
    econ.validate()?;
    if volumes.len() != econ.prices.len() {
        return Err(Error::Config(format!(
            "{} volume components but {} prices",
            volumes.len(),
            econ.prices.len()
        )));
    }
    let mut total = 0.0;
    for ((q, &c), &d) in volumes.iter().zip(&econ.prices).zip(&econ.discounts) {
        let discounted: f64 = q
            .iter()
            .enumerate()
            .map(|(tau, &v)| v / (1.0 + d).powi(tau as i32))
            .sum();
        total += c * discounted;
    }
    Ok(total + econ.drilling.iter().sum::<f64>())
}

pub fn npv(v: &FluidVolumes, econ: &EconomicParams) -> Result<f64> {
    let table = vec![
        v.periods.iter().map(|p| p.oil_produced).collect(),
        v.periods.iter().map(|p| p.water_produced).collect(),
        v.periods.iter().map(|p| p.water_injected).collect(),
    ];
    npv_from_table(&table, econ)
}
