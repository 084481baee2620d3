use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use super::instance::{DemandKind, Instance};
use crate::error::{Error, Result};

/// Volumes at or below this are treated as zero.
pub const VOLUME_EPS: f64 = 1e-9;

/// Off-board demand waiting at `nodes[0]`. `origin` indexes the instance demand
/// entry the material came from, so fulfilment can be credited per requirement.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OffKey {
    pub nodes: Vec<usize>,
    pub kind: DemandKind,
    pub origin: usize,
}

/// On-board material whose next drop-off is `nodes[0]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OnKey {
    pub nodes: Vec<usize>,
    pub origin: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruckState {
    pub position: usize,
    pub clock: f64,
    pub capacity: f64,
    pub load: f64,
    pub onboard: BTreeMap<OnKey, f64>,
    /// Visited nodes, starting with the start node.
    pub route: Vec<usize>,
    /// `(departure time, departure node)` for every move.
    pub departures: Vec<(f64, usize)>,
    pub done: bool,
}

/// Per-node summaries of the demand tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct MyopicVectors {
    pub eps: Vec<Vec<f64>>,
    pub delta_out: Vec<f64>,
    pub delta_in: Vec<f64>,
    /// Row-major `n × n`; entry `(i, j)` sums off-board demand whose first two
    /// nodes are `i, j`.
    pub matrix_demand: Vec<f64>,
}

impl MyopicVectors {
    pub fn zeros(n: usize, trucks: usize) -> Self {
        MyopicVectors {
            eps: vec![vec![0.0; n]; trucks],
            delta_out: vec![0.0; n],
            delta_in: vec![0.0; n],
            matrix_demand: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.delta_out.len()
    }

    pub fn d(&self, i: usize, j: usize) -> f64 {
        self.matrix_demand[i * self.n() + j]
    }

    fn add_offboard(&mut self, nodes: &[usize], v: f64) {
        let n = self.n();
        self.delta_out[nodes[0]] += v;
        self.delta_in[nodes[1]] += v;
        self.matrix_demand[nodes[0] * n + nodes[1]] += v;
    }

    fn clamp(&mut self) {
        // incremental sums can leave round-off residue below zero
        for v in self
            .delta_out
            .iter_mut()
            .chain(self.delta_in.iter_mut())
            .chain(self.matrix_demand.iter_mut())
            .chain(self.eps.iter_mut().flatten())
        {
            if v.abs() < VOLUME_EPS {
                *v = 0.0;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &MyopicVectors) -> f64 {
        let a = self.eps.iter().flatten().chain(&self.delta_out).chain(&self.delta_in).chain(&self.matrix_demand);
        let b = other.eps.iter().flatten().chain(&other.delta_out).chain(&other.delta_in).chain(&other.matrix_demand);
        a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouteLogRow {
    pub truck: usize,
    pub departure_time_s: f64,
    pub departure_node: usize,
}

/// Mutable environment for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    instance: Arc<Instance>,
    pub trucks: Vec<TruckState>,
    pub offboard: BTreeMap<OffKey, f64>,
    /// Fulfilled volume per instance demand entry.
    pub fulfilled: Vec<f64>,
    myopic: MyopicVectors,
    initial_total: f64,
}

impl EnvState {
    pub fn new(instance: Arc<Instance>) -> Result<Self> {
        instance.validate()?;
        let n = instance.n();
        let mut state = EnvState {
            trucks: instance
                .trucks
                .iter()
                .map(|t| TruckState {
                    position: t.start,
                    clock: 0.0,
                    capacity: t.capacity,
                    load: 0.0,
                    onboard: BTreeMap::new(),
                    route: vec![t.start],
                    departures: Vec::new(),
                    done: false,
                })
                .collect(),
            offboard: BTreeMap::new(),
            fulfilled: vec![0.0; instance.demand.len()],
            myopic: MyopicVectors::zeros(n, instance.trucks.len()),
            initial_total: instance.total_demand(),
            instance,
        };
        let entries: Vec<_> = state
            .instance
            .demand
            .iter()
            .enumerate()
            .map(|(origin, d)| {
                (
                    OffKey {
                        nodes: d.nodes.clone(),
                        kind: d.kind,
                        origin,
                    },
                    d.volume,
                )
            })
            .collect();
        for (k, v) in entries {
            state.add_off(k, v);
        }
        Ok(state)
    }

    pub fn instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    pub fn n(&self) -> usize {
        self.instance.n()
    }

    pub fn myopic(&self) -> &MyopicVectors {
        &self.myopic
    }

    pub fn initial_total(&self) -> f64 {
        self.initial_total
    }

    fn add_off(&mut self, key: OffKey, v: f64) {
        self.myopic.add_offboard(&key.nodes, v);
        *self.offboard.entry(key).or_insert(0.0) += v;
    }

    fn add_on(&mut self, m: usize, key: OnKey, v: f64) {
        self.myopic.eps[m][key.nodes[0]] += v;
        self.trucks[m].load += v;
        *self.trucks[m].onboard.entry(key).or_insert(0.0) += v;
    }

    /// Drives truck `m` to `z`, drops off, then picks up. Returns the travel time.
    pub fn step(&mut self, m: usize, z: usize) -> Result<f64> {
        let n = self.n();
        if m >= self.trucks.len() {
            return Err(Error::Argument(format!("unknown truck {m}")));
        }
        if z >= n {
            return Err(Error::Argument(format!("unknown node {z}")));
        }
        let (pos, clock) = (self.trucks[m].position, self.trucks[m].clock);
        let dt = self.instance.time(pos, z);
        if clock + dt > self.instance.horizon_s {
            return Err(Error::InfeasibleMove(format!(
                "truck {m} cannot reach node {z} by {} s (clock {clock} + {dt})",
                self.instance.horizon_s
            )));
        }
        {
            let t = &mut self.trucks[m];
            t.departures.push((clock, pos));
            t.clock = clock + dt;
            t.position = z;
            t.route.push(z);
        }

        // drop-offs
        let dropping: Vec<(OnKey, f64)> = self.trucks[m]
            .onboard
            .iter()
            .filter(|(k, _)| k.nodes[0] == z)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        for (key, v) in dropping {
            self.trucks[m].onboard.remove(&key);
            self.trucks[m].load -= v;
            self.myopic.eps[m][z] -= v;
            if key.nodes.len() == 1 {
                self.fulfilled[key.origin] += v;
            } else {
                self.add_off(
                    OffKey {
                        nodes: key.nodes,
                        kind: DemandKind::Direct,
                        origin: key.origin,
                    },
                    v,
                );
            }
        }
        if self.trucks[m].onboard.is_empty() {
            self.trucks[m].load = 0.0;
        }

        // pickups: whole entries by descending volume, then partial fill
        let lo = OffKey {
            nodes: vec![z],
            kind: DemandKind::Cyclic,
            origin: 0,
        };
        let hi = OffKey {
            nodes: vec![z + 1],
            kind: DemandKind::Cyclic,
            origin: 0,
        };
        let mut candidates: Vec<(OffKey, f64)> = self.offboard.range(lo..hi).map(|(k, v)| (k.clone(), *v)).collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut taken = vec![0.0; candidates.len()];
        for (i, (_, v)) in candidates.iter().enumerate() {
            let free = self.trucks[m].capacity - self.trucks[m].load - taken.iter().sum::<f64>();
            if *v <= free + VOLUME_EPS {
                taken[i] = *v;
            }
        }
        for (i, (_, v)) in candidates.iter().enumerate() {
            let free = self.trucks[m].capacity - self.trucks[m].load - taken.iter().sum::<f64>();
            if taken[i] == 0.0 && free > VOLUME_EPS {
                taken[i] = free.min(*v);
            }
        }
        for ((key, v), take) in candidates.into_iter().zip(taken) {
            if take <= 0.0 {
                continue;
            }
            let left = v - take;
            if left > 0.0 {
                self.offboard.insert(key.clone(), left);
            } else {
                self.offboard.remove(&key);
            }
            self.myopic.add_offboard(&key.nodes, -take);
            let mut stops = key.nodes[1..].to_vec();
            if key.kind == DemandKind::Cyclic {
                stops.push(key.nodes[0]);
            }
            self.add_on(
                m,
                OnKey {
                    nodes: stops,
                    origin: key.origin,
                },
                take,
            );
        }
        self.myopic.clamp();
        Ok(dt)
    }

    /// Returns a copy advanced by one step, with the travel time.
    pub fn stepped(&self, m: usize, z: usize) -> Result<(EnvState, f64)> {
        let mut next = self.clone();
        let dt = next.step(m, z)?;
        Ok((next, dt))
    }

    /// Whether visiting `z` is within the horizon and does something useful.
    pub fn is_feasible(&self, m: usize, z: usize) -> bool {
        let t = &self.trucks[m];
        if t.done || t.clock + self.instance.time(t.position, z) > self.instance.horizon_s {
            return false;
        }
        let drop = self.myopic.eps[m][z];
        if drop > VOLUME_EPS {
            return true;
        }
        self.myopic.delta_out[z] > VOLUME_EPS && t.capacity - (t.load - drop) > VOLUME_EPS
    }

    /// Feasible destinations for truck `m`. An all-false mask ends the truck's route.
    pub fn feasibility_mask(&self, m: usize) -> Vec<bool> {
        (0..self.n()).map(|z| self.is_feasible(m, z)).collect()
    }

    /// The truck with the smallest clock (lowest index on ties) that still has a
    /// feasible move. Trucks without one are retired.
    pub fn next_active(&mut self) -> Option<usize> {
        loop {
            let m = (0..self.trucks.len())
                .filter(|&m| !self.trucks[m].done)
                .min_by(|&a, &b| self.trucks[a].clock.total_cmp(&self.trucks[b].clock))?;
            if self.feasibility_mask(m).iter().any(|&f| f) {
                return Some(m);
            }
            self.trucks[m].done = true;
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.trucks.iter().all(|t| t.done)
    }

    pub fn route_time(&self, m: usize) -> f64 {
        self.trucks[m]
            .route
            .windows(2)
            .map(|w| self.instance.time(w[0], w[1]))
            .sum()
    }

    pub fn total_route_time(&self) -> f64 {
        (0..self.trucks.len()).map(|m| self.route_time(m)).sum()
    }

    pub fn offboard_total(&self) -> f64 {
        self.offboard.values().sum()
    }

    pub fn onboard_total(&self) -> f64 {
        self.trucks.iter().flat_map(|t| t.onboard.values()).sum()
    }

    pub fn fulfilled_total(&self) -> f64 {
        self.fulfilled.iter().sum()
    }

    pub fn unmet(&self) -> f64 {
        self.offboard_total() + self.onboard_total()
    }

    /// Fraction of the initial demand delivered to its final stop.
    pub fn coverage(&self) -> f64 {
        if self.initial_total <= 0.0 {
            1.0
        } else {
            self.fulfilled_total() / self.initial_total
        }
    }

    /// Negated total route time, minus `unmet_penalty` per unit of undelivered volume.
    pub fn episode_reward(&self, unmet_penalty: f64) -> f64 {
        -self.total_route_time() - unmet_penalty * self.unmet()
    }

    /// Myopic vectors summed from scratch.
    pub fn recompute_myopic(&self) -> MyopicVectors {
        let mut out = MyopicVectors::zeros(self.n(), self.trucks.len());
        for (k, v) in &self.offboard {
            out.add_offboard(&k.nodes, *v);
        }
        for (m, t) in self.trucks.iter().enumerate() {
            for (k, v) in &t.onboard {
                out.eps[m][k.nodes[0]] += v;
            }
        }
        out
    }

    pub fn route_log(&self) -> Vec<RouteLogRow> {
        let mut rows: Vec<RouteLogRow> = self
            .trucks
            .iter()
            .enumerate()
            .flat_map(|(m, t)| {
                t.departures.iter().map(move |&(time, node)| RouteLogRow {
                    truck: m,
                    departure_time_s: time,
                    departure_node: node,
                })
            })
            .collect();
        rows.sort_by(|a, b| a.departure_time_s.total_cmp(&b.departure_time_s).then(a.truck.cmp(&b.truck)));
        rows
    }

    pub fn write_route_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.route_log() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense myopic summation straight from the definitions, for cross-checking.
pub fn myopic_dense(state: &EnvState) -> MyopicVectors {
    let n = state.n();
    let mut out = MyopicVectors::zeros(n, state.trucks.len());
    for i in 0..n {
        for j in 0..n {
            let mut dij = 0.0;
            for (k, v) in &state.offboard {
                if k.nodes[0] == i && k.nodes[1] == j {
                    dij += v;
                }
            }
            out.matrix_demand[i * n + j] = dij;
            out.delta_out[i] += dij;
            out.delta_in[j] += dij;
        }
        for (m, t) in state.trucks.iter().enumerate() {
            out.eps[m][i] = t.onboard.iter().filter(|(k, _)| k.nodes[0] == i).map(|(_, v)| v).sum();
        }
    }
    out
}
