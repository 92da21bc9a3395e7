//! DE/rand/1/bin on a box, written for minimization.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::field::DecisionBounds;
use crate::nn::Rng;

pub const MIN_POPULATION: usize = 4;

/// Draws three distinct members, all different from `i`.
fn pick_three(n: usize, i: usize, rng: &mut Rng) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut k = 0;
    while k < 3 {
        let c = rng.random_range(0..n);
        if c != i && !out[..k].contains(&c) {
            out[k] = c;
            k += 1;
        }
    }
    out
}

/// One trial vector per member: mutant `a + F (b − c)`, binomial crossover
/// that keeps at least one mutant coordinate, then clamping to `bounds`.
pub fn de_trials(
    population: &[Vec<f64>],
    weight: f64,
    crossover_rate: f64,
    bounds: &DecisionBounds,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let n = population.len();
    if n < MIN_POPULATION {
        return Err(Error::Config(format!(
            "differential evolution needs a population of at least {MIN_POPULATION}, got {n}"
        )));
    }
    let dim = bounds.lower.len();
    if let Some(bad) = population.iter().find(|m| m.len() != dim) {
        return Err(Error::shape("population member", &[dim], &[bad.len()]));
    }
    let mut trials = Vec::with_capacity(n);
    for (i, parent) in population.iter().enumerate() {
        let [a, b, c] = pick_three(n, i, rng);
        let forced = rng.random_range(0..dim);
        let trial = (0..dim)
            .map(|j| {
                let take = j == forced || rng.random::<f64>() < crossover_rate;
                let v = if take {
                    population[a][j] + weight * (population[b][j] - population[c][j])
                } else {
                    parent[j]
                };
                v.clamp(bounds.lower[j], bounds.upper[j])
            })
            .collect();
        trials.push(trial);
    }
    Ok(trials)
}

/// Greedy replacement: a trial wins when its value is no worse. Returns the
/// number of replacements.
pub fn de_select(
    population: &mut [Vec<f64>],
    values: &mut [f64],
    trials: Vec<Vec<f64>>,
    trial_values: &[f64],
) -> usize {
    let mut replaced = 0;
    for (i, trial) in trials.into_iter().enumerate() {
        if trial_values[i] <= values[i] {
            population[i] = trial;
            values[i] = trial_values[i];
            replaced += 1;
        }
    }
    replaced
}

/// One generation: trials, evaluation through `evaluate`, selection.
pub fn de_step(
    population: &mut [Vec<f64>],
    values: &mut [f64],
    weight: f64,
    crossover_rate: f64,
    bounds: &DecisionBounds,
    rng: &mut Rng,
    mut evaluate: impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
) -> Result<usize> {
    let trials = de_trials(population, weight, crossover_rate, bounds, rng)?;
    let trial_values = evaluate(&trials)?;
    Ok(de_select(population, values, trials, &trial_values))
}
