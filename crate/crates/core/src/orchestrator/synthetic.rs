use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoxGroup, FullInstance};
use crate::env::{DemandKind, NodeSpec};
use crate::error::{Error, Result};

/// Names used when an eight-node instance is generated. Coordinates and travel
/// times attached to them are synthetic.
pub const PLANT_NAMES: [&str; 8] = [
    "NISHIO CROSS-DOCKING",
    "NO.1 AND 2 PLANT",
    "OKAZAKI AND ELECTRIC PLANT",
    "OKAZAKI EAST PLANT",
    "TAHARA PLANT",
    "GAMAGORI PLANT",
    "KIRA PLANT",
    "MEIKO",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub groups: usize,
    pub boxes: usize,
    pub rank3_fraction: f64,
    pub cyclic_fraction: f64,
    pub box_volume_min: f64,
    pub box_volume_max: f64,
    /// Travel seconds per unit of distance in the unit square.
    pub seconds_per_unit: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 21,
            groups: 107,
            boxes: 1000,
            rank3_fraction: 0.3,
            cyclic_fraction: 1.0,
            box_volume_min: 0.02,
            box_volume_max: 0.2,
            seconds_per_unit: 3600.0,
        }
    }
}

impl SyntheticSpec {
    fn max_groups(&self) -> usize {
        let n = self.nodes;
        let rank2 = n * (n - 1);
        let rank3 = if self.rank3_fraction > 0.0 { n * (n - 1) * (n - 2) } else { 0 };
        rank2 + rank3
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 || self.groups == 0 {
            return Err(Error::Argument("need at least 2 nodes and 1 box group".into()));
        }
        if self.boxes < self.groups {
            return Err(Error::Argument(format!(
                "{} boxes cannot fill {} groups",
                self.boxes, self.groups
            )));
        }
        if self.rank3_fraction > 0.0 && self.nodes < 3 {
            return Err(Error::Argument("rank-3 groups need at least 3 nodes".into()));
        }
        if self.rank3_fraction < 1.0 && self.groups > self.max_groups() {
            return Err(Error::Argument(format!("{} nodes admit too few distinct tuples", self.nodes)));
        }
        if !(0.0..=1.0).contains(&self.rank3_fraction) || !(0.0..=1.0).contains(&self.cyclic_fraction) {
            return Err(Error::Argument("fractions must lie in [0, 1]".into()));
        }
        if !(self.box_volume_min > 0.0 && self.box_volume_max >= self.box_volume_min && self.seconds_per_unit > 0.0) {
            return Err(Error::Argument("box volumes and seconds_per_unit must be positive".into()));
        }
        Ok(())
    }
}

/// Random instance with `spec.groups` distinct routing requirements over
/// `spec.boxes` boxes; every group holds at least one box.
pub fn generate_synthetic_instance<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<FullInstance> {
    spec.validate()?;
    let n = spec.nodes;
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let time_matrix = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let d = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
                        ((d * spec.seconds_per_unit) / 60.0).round().max(1.0) * 60.0
                    }
                })
                .collect()
        })
        .collect();
    let nodes = pts
        .iter()
        .enumerate()
        .map(|(id, p)| NodeSpec {
            id,
            name: if n == PLANT_NAMES.len() {
                PLANT_NAMES[id].to_string()
            } else {
                format!("NODE {id:02}")
            },
            x: Some(p[0]),
            y: Some(p[1]),
        })
        .collect();

    let mut groups: Vec<BoxGroup> = Vec::with_capacity(spec.groups);
    let mut attempts = 0usize;
    while groups.len() < spec.groups {
        attempts += 1;
        if attempts > 1000 * spec.groups {
            return Err(Error::Argument("could not draw enough distinct routing requirements".into()));
        }
        let rank = if n >= 3 && rng.random_bool(spec.rank3_fraction) { 3 } else { 2 };
        let kind = if rng.random_bool(spec.cyclic_fraction) {
            DemandKind::Cyclic
        } else {
            DemandKind::Direct
        };
        let mut tuple = vec![rng.random_range(0..n)];
        while tuple.len() < rank {
            let last = *tuple.last().expect("non-empty");
            let mut next = rng.random_range(0..n - 1);
            if next >= last {
                next += 1;
            }
            tuple.push(next);
        }
        let group = BoxGroup {
            kind,
            nodes: tuple,
            boxes: 1,
            box_volume: rng.random_range(spec.box_volume_min..=spec.box_volume_max),
        };
        if group.path().windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        if groups.iter().any(|g| g.kind == group.kind && g.nodes == group.nodes) {
            continue;
        }
        groups.push(group);
    }
    for _ in spec.groups..spec.boxes {
        let g = rng.random_range(0..groups.len());
        groups[g].boxes += 1;
    }
    let inst = FullInstance {
        nodes,
        time_matrix,
        box_groups: groups,
    };
    inst.validate()?;
    Ok(inst)
}
