//! Differential evolution over the field decision space, with an optional
//! uncertainty gate that lets confident surrogate predictions stand in for
//! simulator calls.
//!
//! The optimizer maximizes the objective. Surrogate values are denormalized
//! before they meet simulator values in selection. Accepted surrogate values
//! do enter the population, so a member can hold an estimate rather than a
//! simulated value; the reported best is always re-simulated.

pub mod de;

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{evaluate, DecisionVector, EconomicParams, Objective, ProxyField, DECISION_DIM};
use crate::model::Model;
use crate::uncertainty::{gate, mc_predict_batch, Verdict};

/// How candidates are split between surrogate and simulator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateThreshold {
    /// Accept when the predictive std, in standardized target units, is at
    /// most this value.
    Std(f64),
    /// Simulate the `ceil(q · n)` most uncertain candidates of each batch.
    /// The rest are accepted, together with any candidate tied with the
    /// largest accepted std.
    Quantile(f64),
}

impl GateThreshold {
    fn validate(&self) -> Result<()> {
        match *self {
            GateThreshold::Std(t) if !(t >= 0.0) => {
                Err(Error::Config(format!("gate std threshold must be >= 0, got {t}")))
            }
            GateThreshold::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::Config(format!("gate quantile must lie in [0, 1], got {q}")))
            }
            _ => Ok(()),
        }
    }

    /// Threshold applied to a batch with these stds; `None` simulates all.
    pub fn resolve(&self, stds: &[f64]) -> Option<f64> {
        match *self {
            GateThreshold::Std(t) => Some(t),
            GateThreshold::Quantile(q) => {
                let n = stds.len();
                let simulate = ((q * n as f64).ceil() as usize).min(n);
                if simulate == n {
                    return None;
                }
                let mut sorted = stds.to_vec();
                sorted.sort_by(f64::total_cmp);
                Some(sorted[n - simulate - 1])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub population_size: usize,
    pub generations: usize,
    pub de_weight: f64,
    pub crossover_rate: f64,
    /// `None` runs without a surrogate: every candidate is simulated.
    pub gate: Option<GateThreshold>,
    pub mc_samples: usize,
    /// Relative simulator noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            population_size: 60,
            generations: 50,
            de_weight: 0.7,
            crossover_rate: 0.9,
            gate: None,
            mc_samples: crate::uncertainty::DEFAULT_MC_SAMPLES,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.population_size < de::MIN_POPULATION {
            return bad(format!(
                "population_size must be >= {}, got {}",
                de::MIN_POPULATION,
                self.population_size
            ));
        }
        if !(self.de_weight > 0.0 && self.de_weight < 2.0) {
            return bad(format!("de_weight must lie in (0, 2), got {}", self.de_weight));
        }
        if !(self.crossover_rate > 0.0 && self.crossover_rate <= 1.0) {
            return bad(format!(
                "crossover_rate must lie in (0, 1], got {}",
                self.crossover_rate
            ));
        }
        if self.mc_samples < 2 {
            return bad(format!("mc_samples must be >= 2, got {}", self.mc_samples));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0".into());
        }
        if let Some(g) = &self.gate {
            g.validate()?;
        }
        Ok(())
    }
}

/// The expensive evaluator: proxy field plus objective.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    pub field: &'a ProxyField,
    pub objective: Objective,
    pub economics: &'a EconomicParams,
    pub noise_std: f64,
}

impl Simulator<'_> {
    /// Noise for a call is drawn from the stream `(seed, stream)`, so a
    /// candidate's simulated value does not depend on how others were gated.
    pub fn run(&self, d: &[f64], seed: u64, stream: u64) -> Result<f64> {
        let d = DecisionVector::new(d.to_vec())?;
        let mut rng = crate::seed::stream(seed, "simulate", stream);
        evaluate(&d, self.field, self.objective, self.economics, self.noise_std, &mut rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Surrogate,
    Simulator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedEvaluation {
    pub values: Vec<f64>,
    pub sources: Vec<Source>,
    /// Predictive std per candidate (standardized units), when a surrogate ran.
    pub stds: Vec<Option<f64>>,
    pub simulator_calls: usize,
    pub surrogate_accepts: usize,
}

fn stream_id(generation: usize, index: usize) -> u64 {
    ((generation as u64) << 32) | index as u64
}

/// Scores a batch of raw decision vectors. Without a surrogate or gate,
/// everything is simulated.
pub fn gated_evaluate(
    candidates: &[Vec<f64>],
    surrogate: Option<&Model>,
    threshold: Option<GateThreshold>,
    mc_samples: usize,
    simulator: &Simulator<'_>,
    seed: u64,
    generation: usize,
) -> Result<GatedEvaluation> {
    let n = candidates.len();
    let mut sources = vec![Source::Simulator; n];
    let mut values = vec![f64::NAN; n];
    let mut stds = vec![None; n];

    if let (Some(model), Some(threshold)) = (surrogate, threshold) {
        let norm = model.normalization.as_ref().ok_or_else(|| {
            Error::Data("surrogate has no normalization statistics; cannot gate raw candidates".into())
        })?;
        let raw = Array2::from_shape_vec(
            (n, DECISION_DIM),
            candidates.iter().flatten().copied().collect(),
        )
        .map_err(|_| Error::shape("candidate batch", &[n, DECISION_DIM], &[candidates.len()]))?;
        let x = norm.normalize_features(&raw)?;
        let mc_seed = crate::seed::derive_seed(seed, "gate-mc", generation as u64);
        let preds = mc_predict_batch(model, &x, mc_samples, mc_seed)?;
        let observed: Vec<f64> = preds.iter().map(|p| p.std).collect();
        let cut = threshold.resolve(&observed);
        for (i, p) in preds.iter().enumerate() {
            stds[i] = Some(p.std);
            if let Some(t) = cut {
                if gate(p, t).verdict == Verdict::Accept {
                    sources[i] = Source::Surrogate;
                    values[i] = norm.denormalize_target(p.mean);
                }
            }
        }
    }

    let simulated: Vec<(usize, f64)> = (0..n)
        .into_par_iter()
        .filter(|&i| sources[i] == Source::Simulator)
        .map(|i| Ok((i, simulator.run(&candidates[i], seed, stream_id(generation, i))?)))
        .collect::<Result<_>>()?;
    let simulator_calls = simulated.len();
    for (i, v) in simulated {
        values[i] = v;
    }
    Ok(GatedEvaluation {
        values,
        sources,
        stds,
        simulator_calls,
        surrogate_accepts: n - simulator_calls,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationStats {
    pub generation: usize,
    /// Best and mean population value (mixed sources).
    pub best: f64,
    pub mean: f64,
    pub simulator_calls: usize,
    pub surrogate_accepts: usize,
    pub cumulative_simulator_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub generation: usize,
    pub source: Source,
    pub value: f64,
    pub decision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptRunStats {
    pub config: OptimizerConfig,
    pub objective: Objective,
    pub best_decision: Vec<f64>,
    /// Simulated objective of `best_decision`.
    pub best_objective: f64,
    pub simulator_calls: usize,
    pub surrogate_accepts: usize,
    pub total_evaluations: usize,
    pub generations: Vec<GenerationStats>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl OptRunStats {
    /// CSV of every evaluation: generation, source, value, then the decision.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("generation,source,value");
        for j in 0..DECISION_DIM {
            let _ = write!(s, ",x{j:03}");
        }
        s.push('\n');
        for r in &self.trace {
            let src = match r.source {
                Source::Surrogate => "surrogate",
                Source::Simulator => "simulator",
            };
            let _ = write!(s, "{},{},{}", r.generation, src, r.value);
            for v in &r.decision {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs DE with gated evaluation and verifies the result.
///
/// The initial population is always simulated. The reported best is the
/// better of the best simulated point seen during the run and the final
/// population's leader; the leader is re-simulated if its value came from the
/// surrogate, and that call is counted.
pub fn optimize(
    simulator: &Simulator<'_>,
    surrogate: Option<&Model>,
    config: &OptimizerConfig,
) -> Result<OptRunStats> {
    config.validate()?;
    if config.gate.is_some() && surrogate.is_none() {
        return Err(Error::Config("a gate threshold needs a surrogate model".into()));
    }
    simulator.field.validate()?;
    let bounds = simulator.field.bounds();
    let seed = config.seed;
    let mut rng = crate::seed::stream(seed, "de", 0);

    let mut pop: Vec<Vec<f64>> = (0..config.population_size)
        .map(|_| bounds.sample_point(&mut rng))
        .collect();
    let init = gated_evaluate(&pop, None, None, config.mc_samples, simulator, seed, 0)?;
    let mut values = init.values;
    let mut sources = init.sources;
    let mut trace: Vec<TraceRow> = pop
        .iter()
        .zip(&values)
        .map(|(d, &v)| TraceRow {
            generation: 0,
            source: Source::Simulator,
            value: v,
            decision: d.clone(),
        })
        .collect();
    let mut simulator_calls = init.simulator_calls;
    let mut surrogate_accepts = 0;
    let summarize = |g: usize, v: &[f64], sim: usize, acc: usize, cum: usize| GenerationStats {
        generation: g,
        best: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        simulator_calls: sim,
        surrogate_accepts: acc,
        cumulative_simulator_calls: cum,
    };
    let mut generations = vec![summarize(0, &values, simulator_calls, 0, simulator_calls)];

    for g in 1..=config.generations {
        let trials = de::de_trials(&pop, config.de_weight, config.crossover_rate, &bounds, &mut rng)?;
        let ev = gated_evaluate(
            &trials,
            surrogate,
            config.gate,
            config.mc_samples,
            simulator,
            seed,
            g,
        )?;
        simulator_calls += ev.simulator_calls;
        surrogate_accepts += ev.surrogate_accepts;
        for (i, trial) in trials.into_iter().enumerate() {
            trace.push(TraceRow {
                generation: g,
                source: ev.sources[i],
                value: ev.values[i],
                decision: trial.clone(),
            });
            if ev.values[i] >= values[i] {
                pop[i] = trial;
                values[i] = ev.values[i];
                sources[i] = ev.sources[i];
            }
        }
        generations.push(summarize(
            g,
            &values,
            ev.simulator_calls,
            ev.surrogate_accepts,
            simulator_calls,
        ));
        log::debug!("generation {g}: best {:.6e}", generations[g].best);
    }

    let leader = (0..pop.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("population is non-empty");
    let mut best_decision = pop[leader].clone();
    let mut best_objective = values[leader];
    if sources[leader] == Source::Surrogate {
        best_objective = simulator.run(&best_decision, seed, u64::MAX)?;
        simulator_calls += 1;
        trace.push(TraceRow {
            generation: config.generations,
            source: Source::Simulator,
            value: best_objective,
            decision: best_decision.clone(),
        });
    }
    if let Some(r) = trace
        .iter()
        .filter(|r| r.source == Source::Simulator)
        .max_by(|a, b| a.value.total_cmp(&b.value))
    {
        if r.value > best_objective {
            best_objective = r.value;
            best_decision = r.decision.clone();
        }
    }

    Ok(OptRunStats {
        config: config.clone(),
        objective: simulator.objective,
        best_decision,
        best_objective,
        simulator_calls,
        surrogate_accepts,
        total_evaluations: trace.len(),
        generations,
        trace,
    })
}
