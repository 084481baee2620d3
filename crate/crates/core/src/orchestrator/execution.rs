use rayon::prelude::*;
use serde::Serialize;

use super::simulate::BoxSimulator;
use super::subset::{evaluate_candidates, restrict, score, select_best_subset};
use super::{FullInstance, SubsetSearchConfig};
use crate::env::VOLUME_EPS;
use crate::error::{Error, Result};
use crate::policy::{DecodeMode, Policy};
use crate::seeds::derive_seed;

/// One truck's suggested route in global node ids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuggestedRoute {
    /// Global truck number, `iteration × N′ + m`.
    pub truck: usize,
    pub iteration: usize,
    /// Start node followed by every visited node.
    pub nodes: Vec<usize>,
    /// Departure times planned by the agent, one per move.
    pub departures_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub subset: Vec<usize>,
    /// Whether the subset came from the fallback rule after a fruitless iteration.
    pub fallback: bool,
    pub trial_scores: Vec<f64>,
    pub best_trial: usize,
    /// Volume per box group the agent's rollout completed.
    pub planned: Vec<f64>,
    /// Volume per box group the box-level replay of the team's routes delivered.
    pub fulfilled: Vec<f64>,
    pub remaining_after: f64,
    pub routes: Vec<SuggestedRoute>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExecutionResult {
    pub iterations: Vec<IterationRecord>,
    pub trucks_used: usize,
    pub initial_volume: f64,
}

impl ExecutionResult {
    pub fn routes(&self) -> impl Iterator<Item = &SuggestedRoute> {
        self.iterations.iter().flat_map(|it| it.routes.iter())
    }
}

/// Nodes of the largest remaining requirement, completed with the nodes
/// closest (by travel time) to it.
fn fallback_subset(full: &FullInstance, remaining: &[f64], n_prime: usize) -> Vec<usize> {
    let g = (0..remaining.len())
        .filter(|&g| remaining[g] > VOLUME_EPS)
        .fold(None, |best: Option<usize>, g| match best {
            Some(b) if remaining[b] >= remaining[g] => Some(b),
            _ => Some(g),
        })
        .expect("called with demand left");
    let mut subset: Vec<usize> = Vec::new();
    for &v in &full.box_groups[g].nodes {
        if !subset.contains(&v) {
            subset.push(v);
        }
    }
    let mut others: Vec<usize> = (0..full.n()).filter(|v| !subset.contains(v)).collect();
    let dist = |v: usize| subset.iter().map(|&s| full.time_matrix[s][v]).fold(f64::INFINITY, f64::min);
    others.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    subset.extend(others.into_iter().take(n_prime.saturating_sub(subset.len())));
    subset
}

/// Repeats subset selection, clipped solving and demand subtraction until every
/// box group is served. Each team's routes are replayed box by box before the
/// next iteration, and only boxes that replay delivers are removed from the
/// remaining demand.
pub fn execution_loop(full: &FullInstance, agent: &Policy, config: &SubsetSearchConfig, clip: f64) -> Result<ExecutionResult> {
    config.validate()?;
    full.validate()?;
    if config.n_prime > full.n() {
        return Err(Error::Argument(format!(
            "agent handles {} nodes but the instance has only {}",
            config.n_prime,
            full.n()
        )));
    }
    let mut sim = BoxSimulator::new(full, config.truck_capacity, &config.shifts)?;
    let remaining_of = |sim: &BoxSimulator| -> Vec<f64> {
        sim.undelivered_boxes()
            .iter()
            .zip(&full.box_groups)
            .map(|(&b, g)| b as f64 * g.box_volume)
            .collect()
    };
    let mut remaining = remaining_of(&sim);
    let initial_volume = remaining.iter().sum();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut fruitless = 0;

    while remaining.iter().any(|&r| r > 0.0) {
        let it = iterations.len();
        if it >= config.max_iterations {
            return Err(Error::Stagnation(format!(
                "demand left after the {}-iteration cap: {:.6}",
                config.max_iterations,
                remaining.iter().sum::<f64>()
            )));
        }
        let seed = derive_seed(config.seed, &[it as u64]);
        let fallback = fruitless > 0;
        let subset = if fallback {
            let nodes = fallback_subset(full, &remaining, config.n_prime);
            evaluate_candidates(config, full, &remaining, agent, clip, seed, vec![nodes])?
                .chosen()
                .to_vec()
        } else {
            select_best_subset(config, full, &remaining, agent, clip, seed)?.chosen().to_vec()
        };

        let problem = restrict(full, &remaining, &subset, config, clip);
        let trials = (0..config.k_execution_trials)
            .into_par_iter()
            .map(|t| {
                let mode = if t == 0 { DecodeMode::Greedy } else { DecodeMode::Sample };
                agent.rollout(problem.instance.clone(), mode, derive_seed(seed, &[2, t as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let trial_scores: Vec<f64> = trials.iter().map(score).collect();
        let mut best_trial = 0;
        for (t, &s) in trial_scores.iter().enumerate() {
            if s > trial_scores[best_trial] {
                best_trial = t;
            }
        }
        let best = &trials[best_trial];
        let planned = problem.fulfilled_by_group(best, remaining.len());
        let routes: Vec<SuggestedRoute> = best
            .state
            .trucks
            .iter()
            .enumerate()
            .map(|(m, t)| SuggestedRoute {
                truck: it * config.trucks + m,
                iteration: it,
                nodes: t.route.iter().map(|&v| subset[v]).collect(),
                departures_s: t.departures.iter().map(|d| d.0).collect(),
            })
            .collect();
        let fulfilled = sim.run_team(&routes.iter().collect::<Vec<_>>())?;
        remaining = remaining_of(&sim);
        let served: f64 = fulfilled.iter().sum();
        log::info!(
            "iteration {it}: subset {subset:?}, served {served:.4}, remaining {:.4}",
            remaining.iter().sum::<f64>()
        );
        iterations.push(IterationRecord {
            subset,
            fallback,
            trial_scores,
            best_trial,
            planned,
            fulfilled,
            remaining_after: remaining.iter().sum(),
            routes,
        });

        if served <= VOLUME_EPS {
            fruitless += 1;
            if fruitless >= 2 {
                return Err(Error::Stagnation(format!(
                    "iterations {} and {it} fulfilled no demand; {:.6} volume left",
                    it - 1,
                    remaining.iter().sum::<f64>()
                )));
            }
        } else {
            fruitless = 0;
        }
    }
    Ok(ExecutionResult {
        trucks_used: iterations.len() * config.trucks,
        iterations,
        initial_volume,
    })
}
