//! Synthetic field model standing in for a full-physics reservoir simulator.
//!
//! The field is a 9 km × 3 km × 50 m box with a smooth, multimodal
//! permeability built from Gaussian bumps. Eighteen wells (11 producers,
//! 7 injectors) run on bottom-hole-pressure control over four 5-year
//! periods. Three producers are new and their heel/toe coordinates are
//! decision variables; the other fifteen wells are fixed.
//!
//! Decision vector layout (90 values):
//!
//! | index        | meaning                                              |
//! |--------------|------------------------------------------------------|
//! | `0..18`      | new well `w` (0..3): heel x,y,z then toe x,y,z       |
//! | `18..90`     | well `j` (0..18), period `τ` (0..4) at `18 + 4j + τ` |
//!
//! Wells `0..3` are the new producers, `3..11` the existing producers and
//! `11..18` the injectors.

mod dataset;
mod objective;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, DatasetSidecar, LabeledDataset, Normalization,
    Sampler, Split,
};
pub use objective::{npv, npv_from_table, wcf, EconomicParams, Objective};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Rng;

pub const DECISION_DIM: usize = 90;
pub const PLACEMENT_DIM: usize = 18;
pub const NEW_WELLS: usize = 3;
pub const WELLS: usize = 18;
pub const PRODUCERS: usize = 11;
pub const INJECTORS: usize = 7;
pub const PERIODS: usize = 4;
pub const FIELD_BOX: [f64; 3] = [9000.0, 3000.0, 50.0];

const PI_SAMPLES: usize = 5;

/// 90 decision values in the layout documented at module level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DecisionVector(Vec<f64>);

impl TryFrom<Vec<f64>> for DecisionVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        DecisionVector::new(values)
    }
}

impl From<DecisionVector> for Vec<f64> {
    fn from(d: DecisionVector) -> Self {
        d.0
    }
}

impl DecisionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != DECISION_DIM {
            return Err(Error::shape("decision vector", &[DECISION_DIM], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decision vector entry".into()));
        }
        Ok(DecisionVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn placement(&self) -> &[f64] {
        &self.0[..PLACEMENT_DIM]
    }

    pub fn controls(&self) -> &[f64] {
        &self.0[PLACEMENT_DIM..]
    }

    pub fn bhp(&self, well: usize, period: usize) -> f64 {
        self.0[control_index(well, period)]
    }

    pub fn new_well(&self, w: usize) -> WellTrajectory {
        let p = &self.0[6 * w..6 * w + 6];
        WellTrajectory {
            heel: [p[0], p[1], p[2]],
            toe: [p[3], p[4], p[5]],
        }
    }

    /// Clamps into `bounds`; the flag reports whether anything moved.
    pub fn clamped(&self, bounds: &DecisionBounds) -> (DecisionVector, bool) {
        let mut moved = false;
        let v = self
            .0
            .iter()
            .zip(bounds.lower.iter().zip(&bounds.upper))
            .map(|(&x, (&lo, &hi))| {
                let c = x.clamp(lo, hi);
                moved |= c != x;
                c
            })
            .collect();
        (DecisionVector(v), moved)
    }
}

pub fn control_index(well: usize, period: usize) -> usize {
    PLACEMENT_DIM + PERIODS * well + period
}

pub fn is_injector(well: usize) -> bool {
    well >= PRODUCERS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DecisionBounds {
    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    /// Uniform draw inside the box.
    pub fn sample_point(&self, rng: &mut Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> DecisionVector {
        DecisionVector(self.sample_point(rng))
    }

    /// Bounds scaled by `factor` about zero, e.g. `[150, 250]` → `[225, 375]`
    /// for a factor of 1.5.
    pub fn scaled(&self, factor: f64) -> DecisionBounds {
        DecisionBounds {
            lower: self.lower.iter().map(|v| v * factor).collect(),
            upper: self.upper.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellTrajectory {
    pub heel: [f64; 3],
    pub toe: [f64; 3],
}

impl WellTrajectory {
    pub fn length(&self) -> f64 {
        (0..3)
            .map(|i| (self.toe[i] - self.heel[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermBump {
    pub center: [f64; 3],
    pub amplitude: f64,
    pub radius: f64,
}

/// Descriptor of a synthetic field. Persisted as JSON for exact replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyField {
    pub seed: u64,
    pub bumps: Vec<PermBump>,
    /// Initial reservoir pressure, bar.
    pub initial_pressure: f64,
    /// Fractional pressure loss per period.
    pub pressure_decline: f64,
    /// Water-cut time constant, periods.
    pub water_cut_tau: f64,
    pub period_days: f64,
    /// Rate per bar of drawdown per unit (permeability × km of completion), m³/day.
    pub productivity: f64,
    /// Existing wells: 8 producers followed by 7 injectors.
    pub existing_wells: Vec<WellTrajectory>,
    pub producer_bhp: [f64; 2],
    pub injector_bhp: [f64; 2],
}

impl ProxyField {
    pub const BUMPS: usize = 12;

    pub fn generate(seed: u64) -> Self {
        let mut rng = crate::seed::stream(seed, "field", 0);
        let point = |rng: &mut Rng| {
            [
                rng.random::<f64>() * FIELD_BOX[0],
                rng.random::<f64>() * FIELD_BOX[1],
                rng.random::<f64>() * FIELD_BOX[2],
            ]
        };
        let bumps = (0..Self::BUMPS)
            .map(|_| PermBump {
                center: point(&mut rng),
                amplitude: rng.random_range(0.5..2.0),
                radius: rng.random_range(800.0..2500.0),
            })
            .collect();
        let existing = WELLS - NEW_WELLS;
        let existing_wells = (0..existing)
            .map(|_| {
                let heel = point(&mut rng);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let len = rng.random_range(500.0..1500.0);
                let toe = [
                    (heel[0] + len * angle.cos()).clamp(0.0, FIELD_BOX[0]),
                    (heel[1] + len * angle.sin()).clamp(0.0, FIELD_BOX[1]),
                    rng.random::<f64>() * FIELD_BOX[2],
                ];
                WellTrajectory { heel, toe }
            })
            .collect();
        ProxyField {
            seed,
            bumps,
            initial_pressure: 250.0,
            pressure_decline: 0.05,
            water_cut_tau: 3.0,
            period_days: 5.0 * 365.25,
            productivity: 10.0,
            existing_wells,
            producer_bhp: [150.0, 250.0],
            injector_bhp: [250.0, 350.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.existing_wells.len() != WELLS - NEW_WELLS {
            return Err(Error::Config(format!(
                "field needs {} existing wells, has {}",
                WELLS - NEW_WELLS,
                self.existing_wells.len()
            )));
        }
        if self.bumps.is_empty()
            || self
                .bumps
                .iter()
                .any(|b| !(b.amplitude > 0.0) || !(b.radius > 0.0))
        {
            return Err(Error::Config(
                "field bumps need positive amplitude and radius".into(),
            ));
        }
        if self.producer_bhp[0] > self.producer_bhp[1] || self.injector_bhp[0] > self.injector_bhp[1]
        {
            return Err(Error::Config("bhp bounds must be ordered [min, max]".into()));
        }
        Ok(())
    }

    pub fn permeability(&self, p: [f64; 3]) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let d2: f64 = (0..3).map(|i| (p[i] - b.center[i]).powi(2)).sum();
                b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum()
    }

    /// Mean permeability at five equidistant points along the completion,
    /// times its length in km.
    pub fn productivity_index(&self, well: &WellTrajectory) -> f64 {
        let mean = (0..PI_SAMPLES)
            .map(|k| {
                let t = k as f64 / (PI_SAMPLES - 1) as f64;
                let p = [
                    well.heel[0] + t * (well.toe[0] - well.heel[0]),
                    well.heel[1] + t * (well.toe[1] - well.heel[1]),
                    well.heel[2] + t * (well.toe[2] - well.heel[2]),
                ];
                self.permeability(p)
            })
            .sum::<f64>()
            / PI_SAMPLES as f64;
        mean * well.length() / 1000.0
    }

    pub fn pressure(&self, period: usize) -> f64 {
        self.initial_pressure * (1.0 - self.pressure_decline * (period + 1) as f64)
    }

    pub fn water_cut(&self, period: usize) -> f64 {
        1.0 - (-((period + 1) as f64) / self.water_cut_tau).exp()
    }

    pub fn bounds(&self) -> DecisionBounds {
        let mut lower = Vec::with_capacity(DECISION_DIM);
        let mut upper = Vec::with_capacity(DECISION_DIM);
        for _ in 0..2 * NEW_WELLS {
            for &extent in &FIELD_BOX {
                lower.push(0.0);
                upper.push(extent);
            }
        }
        for well in 0..WELLS {
            let [lo, hi] = if is_injector(well) {
                self.injector_bhp
            } else {
                self.producer_bhp
            };
            for _ in 0..PERIODS {
                lower.push(lo);
                upper.push(hi);
            }
        }
        DecisionBounds { lower, upper }
    }

    pub fn trajectory(&self, d: &DecisionVector, well: usize) -> WellTrajectory {
        if well < NEW_WELLS {
            d.new_well(well)
        } else {
            self.existing_wells[well - NEW_WELLS]
        }
    }
}

/// Volumes produced or injected in one period, m³.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodVolumes {
    pub oil_produced: f64,
    pub water_produced: f64,
    pub water_injected: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FluidVolumes {
    pub periods: [PeriodVolumes; PERIODS],
}

impl FluidVolumes {
    pub fn from_totals(oil: f64, water_produced: f64, water_injected: f64) -> Self {
        let mut v = FluidVolumes::default();
        v.periods[0] = PeriodVolumes {
            oil_produced: oil,
            water_produced,
            water_injected,
        };
        v
    }

    pub fn total_oil(&self) -> f64 {
        self.periods.iter().map(|p| p.oil_produced).sum()
    }

    pub fn total_water_produced(&self) -> f64 {
        self.periods.iter().map(|p| p.water_produced).sum()
    }

    pub fn total_water_injected(&self) -> f64 {
        self.periods.iter().map(|p| p.water_injected).sum()
    }

    fn add(&mut self, other: &FluidVolumes) {
        for (a, b) in self.periods.iter_mut().zip(&other.periods) {
            a.oil_produced += b.oil_produced;
            a.water_produced += b.water_produced;
            a.water_injected += b.water_injected;
        }
    }
}

/// Per-well volumes of one simulation, noise free.
pub fn simulate_wells(d: &DecisionVector, field: &ProxyField) -> Vec<FluidVolumes> {
    (0..WELLS)
        .map(|well| {
            let pi = field.productivity_index(&field.trajectory(d, well));
            let mut v = FluidVolumes::default();
            for (period, pv) in v.periods.iter_mut().enumerate() {
                let p = field.pressure(period);
                let bhp = d.bhp(well, period);
                let scale = field.productivity * pi * field.period_days;
                if is_injector(well) {
                    pv.water_injected = scale * (bhp - p).max(0.0);
                } else {
                    let fluid = scale * (p - bhp).max(0.0);
                    let wc = field.water_cut(period);
                    pv.oil_produced = fluid * (1.0 - wc);
                    pv.water_produced = fluid * wc;
                }
            }
            v
        })
        .collect()
}

/// Runs the proxy. Out-of-bounds decisions are clamped first (and logged);
/// `noise_std` applies independent relative Gaussian noise, floored at zero,
/// to every period volume.
pub fn simulate(d: &DecisionVector, field: &ProxyField, noise_std: f64, rng: &mut Rng) -> FluidVolumes {
    let (d, moved) = d.clamped(&field.bounds());
    if moved {
        log::debug!("decision vector clamped into bounds before simulation");
    }
    let mut total = FluidVolumes::default();
    for w in simulate_wells(&d, field) {
        total.add(&w);
    }
    if noise_std > 0.0 {
        for p in &mut total.periods {
            for v in [&mut p.oil_produced, &mut p.water_produced, &mut p.water_injected] {
                let e: f64 = StandardNormal.sample(rng);
                *v *= (1.0 + noise_std * e).max(0.0);
            }
        }
    }
    total
}

/// Simulates and reduces to the chosen objective.
pub fn evaluate(
    d: &DecisionVector,
    field: &ProxyField,
    objective: Objective,
    econ: &EconomicParams,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let v = simulate(d, field, noise_std, rng);
    match objective {
        Objective::Wcf => Ok(wcf(&v)),
        Objective::Npv => npv(&v, econ),
    }
}
