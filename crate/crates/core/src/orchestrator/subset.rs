use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FullInstance, SubsetSearchConfig};
use crate::env::{DemandSpec, Instance, NodeSpec, TruckSpec, VOLUME_EPS};
use crate::error::{Error, Result};
use crate::policy::{DecodeMode, Policy, Rollout};
use crate::seeds::derive_seed;

/// Draws tuples without replacement and unions their nodes until `n_prime`
/// nodes are collected. A tuple that would overshoot contributes nothing; nodes
/// already present stay. Runs out of tuples → pad with random outside nodes.
pub fn draw_node_subset<R: Rng + ?Sized>(
    tuples: &[Vec<usize>],
    n_total: usize,
    n_prime: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_prime > n_total {
        return Err(Error::Argument(format!(
            "subset size {n_prime} exceeds the {n_total} available nodes"
        )));
    }
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    order.shuffle(rng);
    let mut subset: Vec<usize> = Vec::with_capacity(n_prime);
    for t in order {
        if subset.len() == n_prime {
            break;
        }
        let mut fresh: Vec<usize> = Vec::new();
        for &v in &tuples[t] {
            if !subset.contains(&v) && !fresh.contains(&v) {
                fresh.push(v);
            }
        }
        if subset.len() + fresh.len() <= n_prime {
            subset.extend(fresh);
        }
    }
    if subset.len() < n_prime {
        let mut outside: Vec<usize> = (0..n_total).filter(|v| !subset.contains(v)).collect();
        outside.shuffle(rng);
        subset.extend(outside.into_iter().take(n_prime - subset.len()));
    }
    Ok(subset)
}

/// A restricted, clipped routing problem over a node subset.
#[derive(Clone, Debug)]
pub struct Subproblem {
    pub instance: Arc<Instance>,
    /// Global node id of each local node.
    pub nodes: Vec<usize>,
    /// Box group behind each local demand entry.
    pub groups: Vec<usize>,
}

impl Subproblem {
    /// Volume fulfilled by a rollout, per box group of the full instance.
    pub fn fulfilled_by_group(&self, rollout: &Rollout, group_count: usize) -> Vec<f64> {
        let mut out = vec![0.0; group_count];
        for (k, v) in rollout.state.fulfilled.iter().enumerate() {
            out[self.groups[k]] += v;
        }
        out
    }
}

/// Restricts the remaining demand to groups lying entirely inside `subset`
/// and caps each component at `clip`. Team truck `m` starts at `subset[m % n′]`.
pub fn restrict(
    full: &FullInstance,
    remaining: &[f64],
    subset: &[usize],
    config: &SubsetSearchConfig,
    clip: f64,
) -> Subproblem {
    let local = |v: usize| subset.iter().position(|&s| s == v);
    let mut demand = Vec::new();
    let mut groups = Vec::new();
    for (g, group) in full.box_groups.iter().enumerate() {
        if remaining[g] <= VOLUME_EPS {
            continue;
        }
        let Some(nodes) = group.nodes.iter().map(|&v| local(v)).collect::<Option<Vec<_>>>() else {
            continue;
        };
        demand.push(DemandSpec {
            kind: group.kind,
            nodes,
            volume: remaining[g].min(clip),
        });
        groups.push(g);
    }
    let instance = Instance {
        nodes: subset
            .iter()
            .enumerate()
            .map(|(i, &v)| NodeSpec {
                id: i,
                ..full.nodes[v].clone()
            })
            .collect(),
        time_matrix: subset
            .iter()
            .map(|&a| subset.iter().map(|&b| full.time_matrix[a][b]).collect())
            .collect(),
        trucks: (0..config.trucks)
            .map(|m| TruckSpec {
                capacity: config.truck_capacity,
                start: m % subset.len(),
            })
            .collect(),
        horizon_s: config.horizon_s,
        demand,
    };
    Subproblem {
        instance: Arc::new(instance),
        nodes: subset.to_vec(),
        groups,
    }
}

/// Share of the subproblem's demand a rollout fulfils; zero when it holds no demand.
pub(crate) fn score(rollout: &Rollout) -> f64 {
    let total = rollout.state.initial_total();
    if total <= VOLUME_EPS {
        0.0
    } else {
        rollout.state.fulfilled_total() / total
    }
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub nodes: Vec<usize>,
    /// Score of each sampled rollout, in attempt order.
    pub scores: Vec<f64>,
}

impl Candidate {
    pub fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct SubsetSelection {
    pub candidates: Vec<Candidate>,
    pub best: usize,
}

impl SubsetSelection {
    pub fn chosen(&self) -> &[usize] {
        &self.candidates[self.best].nodes
    }
}

/// Draws `k_node_draws` subsets, evaluates each with `k_subset_attempts`
/// sampled rollouts and keeps the one with the highest mean fulfilled share
/// (earliest draw on ties).
pub fn select_best_subset(
    config: &SubsetSearchConfig,
    full: &FullInstance,
    remaining: &[f64],
    agent: &Policy,
    clip: f64,
    seed: u64,
) -> Result<SubsetSelection> {
    let tuples: Vec<Vec<usize>> = full
        .box_groups
        .iter()
        .zip(remaining)
        .filter(|(_, &r)| r > VOLUME_EPS)
        .map(|(g, _)| g.nodes.clone())
        .collect();
    let draws = (0..config.k_node_draws)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0, k as u64]));
            draw_node_subset(&tuples, full.n(), config.n_prime, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_candidates(config, full, remaining, agent, clip, seed, draws)
}

pub(crate) fn evaluate_candidates(
    config: &SubsetSearchConfig,
    full: &FullInstance,
    remaining: &[f64],
    agent: &Policy,
    clip: f64,
    seed: u64,
    draws: Vec<Vec<usize>>,
) -> Result<SubsetSelection> {
    let jobs: Vec<(usize, usize)> = (0..draws.len())
        .flat_map(|d| (0..config.k_subset_attempts).map(move |a| (d, a)))
        .collect();
    let problems: Vec<Subproblem> = draws.iter().map(|s| restrict(full, remaining, s, config, clip)).collect();
    let scores = jobs
        .par_iter()
        .map(|&(d, a)| {
            let r = agent.rollout(
                problems[d].instance.clone(),
                DecodeMode::Sample,
                derive_seed(seed, &[1, d as u64, a as u64]),
            )?;
            Ok(score(&r))
        })
        .collect::<Result<Vec<f64>>>()?;
    let candidates: Vec<Candidate> = draws
        .into_iter()
        .enumerate()
        .map(|(d, nodes)| Candidate {
            nodes,
            scores: scores[d * config.k_subset_attempts..(d + 1) * config.k_subset_attempts].to_vec(),
        })
        .collect();
    let mut best = 0;
    for (k, c) in candidates.iter().enumerate() {
        if c.mean_score() > candidates[best].mean_score() {
            best = k;
        }
    }
    Ok(SubsetSelection { candidates, best })
}
