use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::execution::SuggestedRoute;
use super::FullInstance;
use crate::error::{Error, Result};

/// Daily windows `[start, end)` in seconds after midnight during which trucks may drive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub windows: Vec<[f64; 2]>,
    pub day_s: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            windows: vec![[0.0, 28_800.0], [57_600.0, 86_400.0]],
            day_s: 86_400.0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || !(self.day_s > 0.0) {
            return Err(Error::Argument("need at least one shift window and a positive day length".into()));
        }
        for w in &self.windows {
            if !(0.0 <= w[0] && w[0] < w[1] && w[1] <= self.day_s) {
                return Err(Error::Argument(format!("shift window {w:?} is not inside the day")));
            }
        }
        Ok(())
    }

    /// Whether a drive over `[depart, arrive]` lies inside one window.
    pub fn contains(&self, depart: f64, arrive: f64) -> bool {
        let day = (depart / self.day_s).floor();
        let base = day * self.day_s;
        self.windows
            .iter()
            .any(|w| depart >= base + w[0] - 1e-9 && arrive <= base + w[1] + 1e-9)
    }

    /// Earliest departure at or after `t` that completes a `duration`-second drive inside a window.
    pub fn next_departure(&self, t: f64, duration: f64) -> Result<f64> {
        if duration <= 0.0 {
            return Ok(t);
        }
        let longest = self.windows.iter().map(|w| w[1] - w[0]).fold(0.0, f64::max);
        if duration > longest + 1e-9 {
            return Err(Error::Argument(format!(
                "a {duration} s drive does not fit in any shift window"
            )));
        }
        let mut day = (t / self.day_s).floor();
        loop {
            let base = day * self.day_s;
            for w in &self.windows {
                let start = t.max(base + w[0]);
                if start + duration <= base + w[1] + 1e-9 {
                    return Ok(start);
                }
            }
            day += 1.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stop {
    pub departure_time_s: f64,
    pub departure_node: usize,
    pub arrival_time_s: f64,
    pub arrival_node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timeline {
    pub truck: usize,
    pub stops: Vec<Stop>,
}

/// One ride of one box.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Leg {
    pub truck: usize,
    pub from: usize,
    pub to: usize,
    pub pickup_s: f64,
    pub dropoff_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxTrace {
    pub group: usize,
    pub volume: f64,
    pub legs: Vec<Leg>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SatisfactionRow {
    pub time_s: f64,
    pub onboard_volume: f64,
    pub satisfied_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FullScaleReport {
    pub iterations: usize,
    pub trucks_used: usize,
    /// Delivered share of the total box volume.
    pub fulfillment_fraction: f64,
    pub fulfilled_boxes: usize,
    pub total_boxes: usize,
    pub timelines: Vec<Timeline>,
    #[serde(skip)]
    pub satisfaction: Vec<SatisfactionRow>,
    #[serde(skip)]
    pub boxes: Vec<BoxTrace>,
}

impl FullScaleReport {
    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Departure listing ordered by time: `Truck,Departure Time,Departure Node`.
    pub fn write_listing<W: Write>(&self, full: &FullInstance, out: W) -> Result<()> {
        let mut rows: Vec<(f64, usize, usize)> = self
            .timelines
            .iter()
            .flat_map(|t| t.stops.iter().map(move |s| (s.departure_time_s, t.truck, s.departure_node)))
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["Truck", "Departure Time", "Departure Node"])?;
        for (t, truck, node) in rows {
            w.write_record([format!("Truck {truck}"), format!("{t:.0}"), full.node_label(node)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_satisfaction<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.satisfaction {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Place {
    Node(usize),
    Truck(usize),
    Done,
}

#[derive(Clone, Debug)]
struct Parcel {
    group: usize,
    volume: f64,
    /// Index into the group's path of the next stop.
    next: usize,
    place: Place,
}

/// Whether `route` visits every node of `rest` in order.
fn covers(route: &[usize], rest: &[usize]) -> bool {
    let mut it = route.iter();
    rest.iter().all(|v| it.any(|r| r == v))
}

struct Vehicle<'r> {
    id: usize,
    route: &'r [usize],
    at: usize,
    clock: f64,
    load: f64,
    onboard: BTreeSet<usize>,
    stops: Vec<Stop>,
}

/// Box-level replay state that can be advanced one team at a time.
///
/// A truck loads a box only when its remaining route visits every stop the box
/// still needs, in order, so each box is either waiting at its origin or
/// delivered once a team has finished.
#[derive(Clone, Debug)]
pub struct BoxSimulator<'a> {
    full: &'a FullInstance,
    capacity: f64,
    shifts: ShiftConfig,
    paths: Vec<Vec<usize>>,
    parcels: Vec<Parcel>,
    traces: Vec<BoxTrace>,
    waiting: Vec<BTreeSet<usize>>,
    delivered_volume: f64,
    total_volume: f64,
    clock: f64,
    teams: usize,
    trucks: usize,
    timelines: Vec<Timeline>,
    satisfaction: Vec<SatisfactionRow>,
}

impl<'a> BoxSimulator<'a> {
    pub fn new(full: &'a FullInstance, capacity: f64, shifts: &ShiftConfig) -> Result<Self> {
        shifts.validate()?;
        full.validate()?;
        if !(capacity > 0.0) {
            return Err(Error::Argument("truck capacity must be positive".into()));
        }
        let paths: Vec<Vec<usize>> = full.box_groups.iter().map(|g| g.path()).collect();
        let mut waiting = vec![BTreeSet::new(); full.n()];
        let mut parcels = Vec::new();
        for (g, group) in full.box_groups.iter().enumerate() {
            for _ in 0..group.boxes {
                waiting[paths[g][0]].insert(parcels.len());
                parcels.push(Parcel {
                    group: g,
                    volume: group.box_volume,
                    next: 1,
                    place: Place::Node(paths[g][0]),
                });
            }
        }
        let mut sim = BoxSimulator {
            full,
            capacity,
            shifts: shifts.clone(),
            traces: parcels
                .iter()
                .map(|p| BoxTrace {
                    group: p.group,
                    volume: p.volume,
                    legs: Vec::new(),
                })
                .collect(),
            parcels,
            paths,
            waiting,
            delivered_volume: 0.0,
            total_volume: full.total_volume(),
            clock: 0.0,
            teams: 0,
            trucks: 0,
            timelines: Vec::new(),
            satisfaction: Vec::new(),
        };
        sim.satisfaction.push(SatisfactionRow {
            time_s: 0.0,
            onboard_volume: 0.0,
            satisfied_fraction: sim.satisfied(),
        });
        Ok(sim)
    }

    fn satisfied(&self) -> f64 {
        if self.total_volume > 0.0 {
            self.delivered_volume / self.total_volume
        } else {
            1.0
        }
    }

    /// Boxes of each group still waiting at their origin.
    pub fn undelivered_boxes(&self) -> Vec<usize> {
        let mut out = vec![0; self.full.box_groups.len()];
        for p in &self.parcels {
            if p.place != Place::Done {
                out[p.group] += 1;
            }
        }
        out
    }

    fn drop_off(&mut self, node: usize, now: f64, onboard: &mut BTreeSet<usize>) -> f64 {
        let mut freed = 0.0;
        let arriving: Vec<usize> = onboard
            .iter()
            .copied()
            .filter(|&b| self.paths[self.parcels[b].group][self.parcels[b].next] == node)
            .collect();
        for b in arriving {
            onboard.remove(&b);
            let p = &mut self.parcels[b];
            freed += p.volume;
            if let Some(leg) = self.traces[b].legs.last_mut() {
                leg.dropoff_s = now;
            }
            p.next += 1;
            if p.next == self.paths[p.group].len() {
                p.place = Place::Done;
                self.delivered_volume += p.volume;
            } else {
                p.place = Place::Node(node);
                self.waiting[node].insert(b);
            }
        }
        freed
    }

    /// Loads whole boxes, largest groups first, while they fit.
    fn pick_up(&mut self, truck: usize, node: usize, ahead: &[usize], now: f64, free: f64, onboard: &mut BTreeSet<usize>) -> f64 {
        let mut candidates: Vec<usize> = self.waiting[node]
            .iter()
            .copied()
            .filter(|&b| covers(ahead, &self.paths[self.parcels[b].group][self.parcels[b].next..]))
            .collect();
        let groups = &self.full.box_groups;
        candidates.sort_by(|&a, &b| {
            let (ga, gb) = (self.parcels[a].group, self.parcels[b].group);
            groups[gb].volume().total_cmp(&groups[ga].volume()).then(ga.cmp(&gb)).then(a.cmp(&b))
        });
        let mut loaded = 0.0;
        for b in candidates {
            let v = self.parcels[b].volume;
            if loaded + v > free + 1e-12 {
                continue;
            }
            loaded += v;
            self.waiting[node].remove(&b);
            onboard.insert(b);
            let p = &mut self.parcels[b];
            p.place = Place::Truck(truck);
            self.traces[b].legs.push(Leg {
                truck,
                from: node,
                to: self.paths[p.group][p.next],
                pickup_s: now,
                dropoff_s: f64::NAN,
            });
        }
        loaded
    }

    /// Drives one team, starting when the previous team finished. Returns the
    /// volume delivered per box group by this team.
    pub fn run_team(&mut self, routes: &[&SuggestedRoute]) -> Result<Vec<f64>> {
        let n = self.full.n();
        for r in routes {
            if r.nodes.is_empty() {
                return Err(Error::Argument(format!("route of truck {} is empty", r.truck)));
            }
            if let Some(&v) = r.nodes.iter().find(|&&v| v >= n) {
                return Err(Error::Argument(format!("route of truck {} visits unknown node {v}", r.truck)));
            }
        }
        let before: Vec<bool> = self.parcels.iter().map(|p| p.place == Place::Done).collect();
        let start = self.clock;
        let mut vehicles: Vec<Vehicle> = routes
            .iter()
            .map(|r| Vehicle {
                id: r.truck,
                route: &r.nodes,
                at: 0,
                clock: start,
                load: 0.0,
                onboard: BTreeSet::new(),
                stops: Vec::new(),
            })
            .collect();
        for v in vehicles.iter_mut() {
            let loaded = self.pick_up(v.id, v.route[0], &v.route[1..], v.clock, self.capacity, &mut v.onboard);
            v.load += loaded;
        }
        loop {
            let mut next: Option<(f64, f64, usize)> = None;
            for (k, v) in vehicles.iter().enumerate() {
                if v.at + 1 >= v.route.len() {
                    continue;
                }
                let duration = self.full.time_matrix[v.route[v.at]][v.route[v.at + 1]];
                let depart = self.shifts.next_departure(v.clock, duration)?;
                let arrive = depart + duration;
                if next.is_none_or(|(best, _, _)| arrive < best) {
                    next = Some((arrive, depart, k));
                }
            }
            let Some((arrive, depart, k)) = next else { break };
            let v = &mut vehicles[k];
            let (from, to) = (v.route[v.at], v.route[v.at + 1]);
            if from != to && !self.shifts.contains(depart, arrive) {
                return Err(Error::Argument(format!(
                    "truck {} would drive outside the shift windows at {depart}",
                    v.id
                )));
            }
            v.stops.push(Stop {
                departure_time_s: depart,
                departure_node: from,
                arrival_time_s: arrive,
                arrival_node: to,
            });
            v.at += 1;
            v.clock = arrive;
            let mut onboard = std::mem::take(&mut v.onboard);
            let freed = self.drop_off(to, arrive, &mut onboard);
            let v = &mut vehicles[k];
            v.load -= freed;
            let (id, ahead, free) = (v.id, &v.route[v.at + 1..], self.capacity - v.load);
            let loaded = self.pick_up(id, to, ahead, arrive, free, &mut onboard);
            let v = &mut vehicles[k];
            v.load += loaded;
            v.onboard = onboard;
            self.satisfaction.push(SatisfactionRow {
                time_s: arrive,
                onboard_volume: vehicles.iter().map(|v| v.load).sum::<f64>().max(0.0),
                satisfied_fraction: self.satisfied(),
            });
        }
        for v in vehicles {
            debug_assert!(v.onboard.is_empty(), "boxes are only loaded toward stops ahead");
            self.clock = self.clock.max(v.clock);
            self.timelines.push(Timeline {
                truck: v.id,
                stops: v.stops,
            });
        }
        self.teams += 1;
        self.trucks += routes.len();
        let mut delivered = vec![0.0; self.full.box_groups.len()];
        for (p, was) in self.parcels.iter().zip(before) {
            if p.place == Place::Done && !was {
                delivered[p.group] += p.volume;
            }
        }
        Ok(delivered)
    }

    pub fn finish(self) -> FullScaleReport {
        let fulfilled_boxes = self.parcels.iter().filter(|p| p.place == Place::Done).count();
        FullScaleReport {
            iterations: self.teams,
            trucks_used: self.trucks,
            fulfillment_fraction: self.satisfied(),
            fulfilled_boxes,
            total_boxes: self.parcels.len(),
            timelines: self.timelines,
            satisfaction: self.satisfaction,
            boxes: self.traces,
        }
    }
}

/// Replays suggested routes with individually tracked boxes. Teams from
/// successive iterations drive one after another; within a team, moves are
/// processed in arrival order and every drive fits inside a shift window.
pub fn simulate_full_scale(
    full: &FullInstance,
    routes: &[SuggestedRoute],
    capacity: f64,
    shifts: &ShiftConfig,
) -> Result<FullScaleReport> {
    let mut sim = BoxSimulator::new(full, capacity, shifts)?;
    let mut teams: Vec<usize> = routes.iter().map(|r| r.iteration).collect();
    teams.sort_unstable();
    teams.dedup();
    for team in teams {
        let members: Vec<&SuggestedRoute> = routes.iter().filter(|r| r.iteration == team).collect();
        sim.run_team(&members)?;
    }
    Ok(sim.finish())
}
