//! Scaling a small trained agent to a full instance.

mod execution;
mod simulate;
mod subset;
mod synthetic;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{DemandKind, DemandSpec, NodeSpec};
use crate::error::{Error, Result};

pub use execution::{execution_loop, ExecutionResult, IterationRecord, SuggestedRoute};
pub use simulate::{simulate_full_scale, BoxSimulator, BoxTrace, FullScaleReport, Leg, SatisfactionRow, ShiftConfig, Stop, Timeline};
pub use subset::{draw_node_subset, restrict, select_best_subset, Candidate, Subproblem, SubsetSelection};
pub use synthetic::{generate_synthetic_instance, SyntheticSpec, PLANT_NAMES};

/// Parameters of the subset search and execution loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetSearchConfig {
    /// Nodes per subproblem.
    pub n_prime: usize,
    /// Trucks per team.
    pub trucks: usize,
    pub k_node_draws: usize,
    pub k_subset_attempts: usize,
    pub k_execution_trials: usize,
    /// Per-component demand cap; `None` uses the value stored with the agent.
    pub clip: Option<f64>,
    pub truck_capacity: f64,
    pub horizon_s: f64,
    pub max_iterations: usize,
    pub shifts: ShiftConfig,
    pub seed: u64,
}

impl Default for SubsetSearchConfig {
    fn default() -> Self {
        SubsetSearchConfig {
            n_prime: 8,
            trucks: 2,
            k_node_draws: 4,
            k_subset_attempts: 4,
            k_execution_trials: 4,
            clip: None,
            truck_capacity: 10.0,
            horizon_s: 57_600.0,
            max_iterations: 500,
            shifts: ShiftConfig::default(),
            seed: 0,
        }
    }
}

impl SubsetSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prime < 2 || self.trucks == 0 {
            return Err(Error::Argument("n_prime must be at least 2 and trucks at least 1".into()));
        }
        if self.k_node_draws == 0 || self.k_subset_attempts == 0 || self.k_execution_trials == 0 || self.max_iterations == 0 {
            return Err(Error::Argument("k_node_draws, k_subset_attempts, k_execution_trials and max_iterations must be at least 1".into()));
        }
        if !(self.truck_capacity > 0.0 && self.horizon_s > 0.0) || matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Argument("truck_capacity, horizon_s and clip must be positive".into()));
        }
        self.shifts.validate()
    }
}

/// All boxes sharing one routing requirement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxGroup {
    pub kind: DemandKind,
    pub nodes: Vec<usize>,
    pub boxes: usize,
    pub box_volume: f64,
}

impl BoxGroup {
    pub fn volume(&self) -> f64 {
        self.boxes as f64 * self.box_volume
    }

    /// Stops every box visits, starting at its origin; cyclic groups end back at the origin.
    pub fn path(&self) -> Vec<usize> {
        let mut p = self.nodes.clone();
        if self.kind == DemandKind::Cyclic {
            p.push(self.nodes[0]);
        }
        p
    }
}

/// A full-size problem described box group by box group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullInstance {
    pub nodes: Vec<NodeSpec>,
    pub time_matrix: Vec<Vec<f64>>,
    pub box_groups: Vec<BoxGroup>,
}

impl FullInstance {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.time_matrix.len() != n || self.time_matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Argument(format!("time matrix must be {n}×{n}")));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Argument(format!("node at position {i} has id {}", node.id)));
            }
        }
        for (g, group) in self.box_groups.iter().enumerate() {
            if group.boxes == 0 || !(group.box_volume > 0.0) {
                return Err(Error::Argument(format!("box group {g} needs at least one box of positive volume")));
            }
            if !(2..=3).contains(&group.nodes.len()) || group.nodes.iter().any(|&v| v >= n) {
                return Err(Error::Argument(format!("box group {g} has an invalid node tuple")));
            }
            if group.path().windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Argument(format!("box group {g} repeats a node consecutively")));
            }
        }
        Ok(())
    }

    /// Aggregated demand, one entry per box group.
    pub fn demand(&self) -> Vec<DemandSpec> {
        self.box_groups
            .iter()
            .map(|g| DemandSpec {
                kind: g.kind,
                nodes: g.nodes.clone(),
                volume: g.volume(),
            })
            .collect()
    }

    pub fn total_volume(&self) -> f64 {
        self.box_groups.iter().map(BoxGroup::volume).sum()
    }

    pub fn node_label(&self, i: usize) -> String {
        match self.nodes.get(i) {
            Some(n) if !n.name.is_empty() => n.name.clone(),
            _ => i.to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let inst: FullInstance = serde_json::from_str(&fs::read_to_string(path)?)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
