use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandKind {
    /// Must return to its first node after the listed stops.
    Cyclic,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: usize,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruckSpec {
    pub capacity: f64,
    #[serde(default)]
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub kind: DemandKind,
    pub nodes: Vec<usize>,
    pub volume: f64,
}

/// A routing problem: nodes, travel times in seconds, trucks and initial demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub nodes: Vec<NodeSpec>,
    pub time_matrix: Vec<Vec<f64>>,
    pub trucks: Vec<TruckSpec>,
    pub horizon_s: f64,
    pub demand: Vec<DemandSpec>,
}

/// Sparse demand of one kind and rank, keyed by node tuple.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemandTensor {
    pub kind: Option<DemandKind>,
    pub rank: usize,
    entries: BTreeMap<Vec<usize>, f64>,
}

impl DemandTensor {
    pub fn new(kind: DemandKind, rank: usize) -> Self {
        DemandTensor {
            kind: Some(kind),
            rank,
            entries: BTreeMap::new(),
        }
    }

    /// Adds `volume` to `tuple`; entries that reach zero are dropped.
    pub fn add(&mut self, tuple: &[usize], volume: f64) -> Result<()> {
        if tuple.len() != self.rank {
            return Err(Error::Argument(format!(
                "tuple {tuple:?} does not have rank {}",
                self.rank
            )));
        }
        let v = self.entries.entry(tuple.to_vec()).or_insert(0.0);
        *v += volume;
        if *v < 0.0 {
            return Err(Error::Argument(format!("negative volume at {tuple:?}")));
        }
        if *v == 0.0 {
            self.entries.remove(tuple);
        }
        Ok(())
    }

    pub fn get(&self, tuple: &[usize]) -> f64 {
        self.entries.get(tuple).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.entries.iter().map(|(k, v)| (k.as_slice(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }
}

impl Instance {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn time(&self, i: usize, j: usize) -> f64 {
        self.time_matrix[i][j]
    }

    pub fn total_demand(&self) -> f64 {
        self.demand.iter().map(|d| d.volume).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Argument("instance has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Argument(format!(
                    "node ids must be 0..{n} in order; position {i} has id {}",
                    node.id
                )));
            }
            if node.x.is_some() != node.y.is_some() {
                return Err(Error::Argument(format!("node {i} has only one coordinate")));
            }
        }
        if self.time_matrix.len() != n || self.time_matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Argument(format!("time matrix must be {n}×{n}")));
        }
        for i in 0..n {
            for j in 0..n {
                let t = self.time_matrix[i][j];
                let ok = if i == j { t == 0.0 } else { t.is_finite() && t > 0.0 };
                if !ok {
                    return Err(Error::Argument(format!("bad travel time T[{i}][{j}] = {t}")));
                }
            }
        }
        if self.trucks.is_empty() {
            return Err(Error::Argument("instance has no trucks".into()));
        }
        for (m, t) in self.trucks.iter().enumerate() {
            if !(t.capacity.is_finite() && t.capacity > 0.0) || t.start >= n {
                return Err(Error::Argument(format!("truck {m} has invalid capacity or start")));
            }
        }
        if !(self.horizon_s.is_finite() && self.horizon_s >= 0.0) {
            return Err(Error::Argument("horizon must be non-negative".into()));
        }
        for (k, d) in self.demand.iter().enumerate() {
            let r = d.nodes.len();
            if !(2..=3).contains(&r) {
                return Err(Error::Argument(format!("demand {k} has rank {r}; ranks 2 and 3 are supported")));
            }
            if d.nodes.iter().any(|&v| v >= n) {
                return Err(Error::Argument(format!("demand {k} references an unknown node")));
            }
            if d.nodes.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Argument(format!("demand {k} repeats a node consecutively")));
            }
            if d.kind == DemandKind::Cyclic && d.nodes.first() == d.nodes.last() {
                return Err(Error::Argument(format!("cyclic demand {k} already returns to its origin")));
            }
            if !(d.volume.is_finite() && d.volume > 0.0) {
                return Err(Error::Argument(format!("demand {k} has non-positive volume")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Groups the demand list into tensors by kind and rank.
    pub fn demand_tensors(&self) -> Vec<DemandTensor> {
        let mut by: BTreeMap<(DemandKind, usize), DemandTensor> = BTreeMap::new();
        for d in &self.demand {
            by.entry((d.kind, d.nodes.len()))
                .or_insert_with(|| DemandTensor::new(d.kind, d.nodes.len()))
                .add(&d.nodes, d.volume)
                .expect("validated demand");
        }
        by.into_values().collect()
    }

    /// Node coordinates in the unit square. Falls back to a classical MDS
    /// embedding of the symmetrised time matrix when coordinates are missing.
    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        if self.nodes.iter().all(|n| n.x.is_some()) {
            return self
                .nodes
                .iter()
                .map(|n| [n.x.unwrap_or(0.0), n.y.unwrap_or(0.0)])
                .collect();
        }
        mds_embedding(&self.time_matrix)
    }
}

/// Two-dimensional classical multidimensional scaling, rescaled into `[0, 1]²`.
pub fn mds_embedding(dist: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = dist.len();
    if n < 2 {
        return vec![[0.5, 0.5]; n];
    }
    let sq = DMatrix::from_fn(n, n, |i, j| {
        let d = 0.5 * (dist[i][j] + dist[j][i]);
        d * d
    });
    let centering = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = -0.5 * &centering * sq * &centering;
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let mut pts = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        for (i, p) in pts.iter_mut().enumerate() {
            p[axis] = eig.eigenvectors[(i, k)] * scale;
        }
    }
    let lo = [0, 1].map(|a| pts.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1].map(|a| pts.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max));
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if span <= 0.0 {
        return vec![[0.5, 0.5]; n];
    }
    pts.iter()
        .map(|p| [(p[0] - lo[0]) / span, (p[1] - lo[1]) / span])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Instance {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let time_matrix = pts
            .iter()
            .map(|a| {
                pts.iter()
                    .map(|b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() * 100.0)
                    .collect()
            })
            .collect();
        Instance {
            nodes: (0..4)
                .map(|id| NodeSpec {
                    id,
                    name: format!("N{id}"),
                    x: None,
                    y: None,
                })
                .collect(),
            time_matrix,
            trucks: vec![TruckSpec { capacity: 5.0, start: 0 }],
            horizon_s: 1000.0,
            demand: vec![DemandSpec {
                kind: DemandKind::Cyclic,
                nodes: vec![0, 2],
                volume: 1.0,
            }],
        }
    }

    #[test]
    fn json_round_trip() {
        let inst = square();
        let text = serde_json::to_string(&inst).unwrap();
        assert_eq!(Instance::from_json_str(&text).unwrap(), inst);
    }

    #[test]
    fn mds_recovers_square_geometry() {
        let pts = square().coordinates();
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        // sides equal, diagonals √2 longer
        let side = d(pts[0], pts[1]);
        for (i, j) in [(1, 2), (2, 3), (3, 0)] {
            assert!((d(pts[i], pts[j]) - side).abs() < 1e-9);
        }
        assert!((d(pts[0], pts[2]) / side - 2f64.sqrt()).abs() < 1e-9);
        assert!(pts.iter().all(|p| p.iter().all(|c| (-1e-12..=1.0 + 1e-12).contains(c))));
    }

    #[test]
    fn validation_catches_bad_input() {
        let mut inst = square();
        inst.time_matrix[1][2] = 0.0;
        assert!(inst.validate().is_err());
        let mut inst = square();
        inst.demand[0].nodes = vec![0, 2, 0];
        assert!(inst.validate().is_err());
        let mut inst = square();
        inst.demand[0].nodes = vec![0, 9];
        assert!(inst.validate().is_err());
    }

    #[test]
    fn tensors_group_by_kind_and_rank() {
        let mut inst = square();
        inst.demand.push(DemandSpec {
            kind: DemandKind::Direct,
            nodes: vec![1, 3, 2],
            volume: 2.0,
        });
        inst.demand.push(DemandSpec {
            kind: DemandKind::Cyclic,
            nodes: vec![0, 2],
            volume: 0.5,
        });
        let ts = inst.demand_tensors();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].get(&[0, 2]), 1.5);
        assert_eq!(ts[1].rank, 3);
    }
}
