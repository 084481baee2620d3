use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{DemandKind, DemandSpec, Instance, NodeSpec, TruckSpec};
use crate::error::{Error, Result};

/// Random training instances: nodes uniform in the unit square, travel time
/// proportional to Euclidean distance, demand tuples drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub nodes: usize,
    pub trucks: usize,
    pub capacity: f64,
    /// Distinct demand tuples per instance (fewer if the node count allows fewer).
    pub tuples: usize,
    /// Probability that a tuple has rank 3 instead of 2.
    pub rank3_fraction: f64,
    /// Probability that a tuple is cyclic.
    pub cyclic_fraction: f64,
    /// Volumes are uniform in `[1, volume_max]`.
    pub volume_max: f64,
    pub seconds_per_unit: f64,
    pub horizon_s: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            nodes: 4,
            trucks: 1,
            capacity: 10.0,
            tuples: 3,
            rank3_fraction: 0.0,
            cyclic_fraction: 0.0,
            volume_max: 5.0,
            seconds_per_unit: 3600.0,
            horizon_s: 57_600.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.trucks == 0 {
            return Err(Error::Argument("sampler needs at least one node and one truck".into()));
        }
        if !(self.capacity > 0.0 && self.volume_max >= 1.0 && self.seconds_per_unit > 0.0 && self.horizon_s > 0.0) {
            return Err(Error::Argument(
                "capacity, seconds_per_unit and horizon_s must be positive and volume_max at least 1".into(),
            ));
        }
        for (name, f) in [("rank3_fraction", self.rank3_fraction), ("cyclic_fraction", self.cyclic_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Argument(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.rank3_fraction > 0.0 && self.nodes < 3 {
            return Err(Error::Argument("rank-3 demand needs at least 3 nodes".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Instance {
        let n = self.nodes;
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let time_matrix = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let d = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
                            (d * self.seconds_per_unit).max(1.0)
                        }
                    })
                    .collect()
            })
            .collect();

        let mut demand: Vec<DemandSpec> = Vec::new();
        let mut attempts = 0;
        while n >= 2 && demand.len() < self.tuples && attempts < 100 * self.tuples {
            attempts += 1;
            let rank = if rng.random_bool(self.rank3_fraction) { 3 } else { 2 };
            let kind = if rng.random_bool(self.cyclic_fraction) {
                DemandKind::Cyclic
            } else {
                DemandKind::Direct
            };
            let mut nodes = vec![rng.random_range(0..n)];
            while nodes.len() < rank {
                let last = *nodes.last().expect("non-empty");
                let mut next = rng.random_range(0..n - 1);
                if next >= last {
                    next += 1;
                }
                nodes.push(next);
            }
            if kind == DemandKind::Cyclic && rank == 3 && nodes[2] == nodes[0] {
                continue;
            }
            if demand.iter().any(|d| d.kind == kind && d.nodes == nodes) {
                continue;
            }
            demand.push(DemandSpec {
                kind,
                nodes,
                volume: rng.random_range(1.0..=self.volume_max),
            });
        }
        demand.shuffle(rng);

        Instance {
            nodes: pts
                .iter()
                .enumerate()
                .map(|(id, p)| NodeSpec {
                    id,
                    name: String::new(),
                    x: Some(p[0]),
                    y: Some(p[1]),
                })
                .collect(),
            time_matrix,
            trucks: vec![
                TruckSpec {
                    capacity: self.capacity,
                    start: 0,
                };
                self.trucks
            ],
            horizon_s: self.horizon_s,
            demand,
        }
    }
}
