use std::f64::consts::PI;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{PolicyConfig, QuantumHeads, ENCODER_LAYERS};
use crate::autodiff::{batch_norm, BatchStats, BnRunning, ParamId, ParamStore, Tape, Tensor, Var, MASK_SENTINEL};
use crate::env::{EnvState, Instance};
use crate::error::{Error, Result};
use crate::qonn::{pyramid_gate_count, qonn_rows};

/// Upper bound on decisions per episode, as a guard against runaway loops.
const MAX_STEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub key_sources: Vec<ParamId>,
    pub value_sources: Vec<ParamId>,
    /// `(A_basic, A_mask, A_log, A_lin)`.
    pub masking: ParamId,
    pub theta_query: Option<ParamId>,
    pub theta_key: Option<ParamId>,
    pub theta_value: Option<ParamId>,
}

impl HeadParams {
    pub fn is_quantum(&self) -> bool {
        self.theta_query.is_some() || self.theta_key.is_some() || self.theta_value.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<HeadParams>,
    pub merge_w: ParamId,
    pub merge_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub mha: MhaParams,
    pub bn1: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub bn2: (ParamId, ParamId),
}

/// Multiplicative compatibility modulation derived from a demand matrix block.
///
/// `basis` holds the constant fields multiplied by `(A_basic, A_mask, A_log, A_lin)`;
/// `hard` marks entries that get the sentinel once the mask or log coefficient is
/// active; `extra` is an always-on additive mask.
#[derive(Clone, Debug)]
pub struct DemandGate {
    pub rows: usize,
    pub cols: usize,
    pub basis: Vec<Vec<f64>>,
    pub hard: Vec<bool>,
    pub extra: Vec<f64>,
}

impl DemandGate {
    /// `demand` is row-major `rows × cols`. Entries with `exempt(i, j)` never get
    /// the hard mask.
    pub fn new(rows: usize, cols: usize, demand: &[f64], hard_mask: bool, exempt: impl Fn(usize, usize) -> bool) -> Self {
        let len = rows * cols;
        let ones = vec![1.0; len];
        let ind: Vec<f64> = demand.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect();
        let log: Vec<f64> = demand.iter().map(|&d| if d > 0.0 { d.ln() } else { 0.0 }).collect();
        let hard = (0..len)
            .map(|k| hard_mask && demand[k] <= 0.0 && !exempt(k / cols, k % cols))
            .collect();
        DemandGate {
            rows,
            cols,
            basis: vec![ones, ind, log, demand.to_vec()],
            hard,
            extra: vec![0.0; len],
        }
    }

    fn mask(&self, coeffs: &[f64]) -> Tensor {
        let active = coeffs[1] != 0.0 || coeffs[2] != 0.0;
        let data = self
            .extra
            .iter()
            .zip(&self.hard)
            .map(|(&e, &h)| if active && h { e + MASK_SENTINEL } else { e })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("gate shape")
    }
}

/// `x · M + Σ s_k u_kᵀ`, followed by the head's circuit when present.
fn project(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    m: ParamId,
    sources: &[(Var, ParamId)],
    theta: Option<ParamId>,
) -> Result<Var> {
    let mv = tape.param(store, m);
    let mut out = tape.matmul(x, mv)?;
    for &(s, u) in sources {
        let uv = tape.param(store, u);
        let term = tape.matmul(s, uv)?;
        out = tape.add(out, term)?;
    }
    if let Some(t) = theta {
        let tv = tape.param(store, t);
        out = qonn_rows(tape, out, tv)?;
    }
    Ok(out)
}

/// One attention head: `softmax((1/√α) · G ⊙ (q kᵀ) + mask) · v`.
pub fn head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    masking: ParamId,
    gate: &DemandGate,
) -> Result<Var> {
    let alpha = tape.value(q).cols() as f64;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let a = tape.param(store, masking);
    let g = tape.lin_comb(a, gate.basis.clone(), &[gate.rows, gate.cols])?;
    let modulated = tape.mul(g, scores)?;
    let u = tape.scale(modulated, 1.0 / alpha.sqrt());
    let mask = gate.mask(store.get(masking).data());
    let rho = tape.softmax_rows(u, &mask)?;
    tape.matmul(rho, v)
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
/// `sources` are `n × 1` columns shared by keys and values.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MhaParams,
    xq: Var,
    xkv: Var,
    sources: &[Var],
    gate: &DemandGate,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let ks: Vec<(Var, ParamId)> = sources.iter().copied().zip(head.key_sources.iter().copied()).collect();
        let vs: Vec<(Var, ParamId)> = sources.iter().copied().zip(head.value_sources.iter().copied()).collect();
        let q = project(tape, store, xq, head.query, &[], head.theta_query)?;
        let k = project(tape, store, xkv, head.key, &ks, head.theta_key)?;
        let v = project(tape, store, xkv, head.value, &vs, head.theta_value)?;
        outs.push(head_attention(tape, store, q, k, v, head.masking, gate)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let w = tape.param(store, params.merge_w);
    let b = tape.param(store, params.merge_b);
    let merged = tape.matmul(cat, w)?;
    tape.add_row(merged, b)
}

/// Encoder/decoder attention policy with optional quantum heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    /// Running statistics, two per encoder layer.
    pub bn: Vec<BnRunning>,
    pub embed: (ParamId, ParamId),
    pub layers: Vec<EncoderLayer>,
    pub context: (ParamId, ParamId),
    pub glimpse: MhaParams,
    pub pointer: ParamId,
    /// Key source rows for the pointer: `δ_out`, `δ_in`, `ε^m`, the demand row and
    /// the travel-time row of the active truck's position.
    pub pointer_sources: Vec<ParamId>,
}

/// Number of key/value source terms in the encoder (`δ_out`, `δ_in`) and decoder
/// (`δ_out`, `δ_in`, `ε^m`).
const ENCODER_SOURCES: usize = 2;
const DECODER_SOURCES: usize = 3;
const POINTER_SOURCES: usize = 5;
/// Context features: remaining capacity, remaining time, remaining outgoing demand.
const CONTEXT_FEATURES: usize = 3;
/// Node features: two coordinates, initial `δ_in`, initial `δ_out`.
const NODE_FEATURES: usize = 4;

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    bound: f64,
}

impl<R: Rng> Init<'_, R> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let b = self.bound;
        let data = (0..rows * cols).map(|_| self.rng.random_range(-b..=b)).collect();
        self.store.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
    }

    fn zeros(&mut self, name: String, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[1, cols]))
    }

    fn filled(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::filled(&[1, cols], v))
    }

    fn angles(&mut self, name: String, qubits: usize) -> ParamId {
        let data = (0..pyramid_gate_count(qubits)).map(|_| self.rng.random_range(-PI..PI)).collect();
        self.store.add(name, Tensor::new(vec![1, pyramid_gate_count(qubits)], data).expect("shape"))
    }

    fn mha(&mut self, prefix: &str, d: usize, n_heads: usize, sources: usize, quantum: QuantumHeads) -> MhaParams {
        let a = d / n_heads;
        let heads = (0..n_heads)
            .map(|s| {
                let p = format!("{prefix}.head{s}");
                let q = quantum.is_quantum(s);
                HeadParams {
                    query: self.matrix(format!("{p}.query"), d, a),
                    key: self.matrix(format!("{p}.key"), d, a),
                    value: self.matrix(format!("{p}.value"), d, a),
                    key_sources: (0..sources).map(|k| self.matrix(format!("{p}.key_source{k}"), 1, a)).collect(),
                    value_sources: (0..sources).map(|k| self.matrix(format!("{p}.value_source{k}"), 1, a)).collect(),
                    masking: self.store.add(format!("{p}.masking"), Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).expect("shape")),
                    theta_query: (q && quantum.query).then(|| self.angles(format!("{p}.theta_query"), a)),
                    theta_key: (q && quantum.key).then(|| self.angles(format!("{p}.theta_key"), a)),
                    theta_value: (q && quantum.value).then(|| self.angles(format!("{p}.theta_value"), a)),
                }
            })
            .collect();
        MhaParams {
            heads,
            merge_w: self.matrix(format!("{prefix}.merge_w"), d, d),
            merge_b: self.zeros(format!("{prefix}.merge_b"), d),
        }
    }
}

/// Scaled initial myopic data of an instance: `(δ_out, δ_in, D)`.
fn initial_demand(instance: &Instance, scale: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = instance.n();
    let (mut out, mut inn, mut mat) = (vec![0.0; n], vec![0.0; n], vec![0.0; n * n]);
    for d in &instance.demand {
        let v = d.volume / scale;
        out[d.nodes[0]] += v;
        inn[d.nodes[1]] += v;
        mat[d.nodes[0] * n + d.nodes[1]] += v;
    }
    (out, inn, mat)
}

fn column(tape: &mut Tape, values: Vec<f64>) -> Var {
    let n = values.len();
    tape.constant(Tensor::new(vec![n, 1], values).expect("column"))
}

/// How the next node is chosen during a rollout.
#[derive(Clone, Debug, PartialEq)]
pub enum DecodeMode {
    Sample,
    Greedy,
    /// Forces the given node sequence.
    Replay(Vec<usize>),
}

/// Output of the encoder for one instance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub nodes: Var,
    pub mean: Var,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub state: EnvState,
    /// `(truck, node)` per decision.
    pub actions: Vec<(usize, usize)>,
    pub step_probs: Vec<f64>,
    /// `Σ_t ln π_t`, or `ln Σ_t π_t` in literal mode; `None` when no decision was made.
    pub log_prob: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub state: EnvState,
    pub actions: Vec<(usize, usize)>,
    pub step_probs: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub coverage: f64,
}

impl Rollout {
    /// Per-truck visited node sequences.
    pub fn routes(&self) -> Vec<Vec<usize>> {
        self.state.trucks.iter().map(|t| t.route.clone()).collect()
    }
}

impl Policy {
    pub fn new<R: Rng>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
            bound: 1.0 / (d as f64).sqrt(),
        };
        let embed = (init.matrix("embed.w".into(), NODE_FEATURES, d), init.zeros("embed.b".into(), d));
        let layers = (0..ENCODER_LAYERS)
            .map(|l| {
                let p = format!("encoder{l}");
                EncoderLayer {
                    mha: init.mha(&format!("{p}.mha"), d, config.n_heads, ENCODER_SOURCES, config.encoder_quantum),
                    bn1: (init.filled(format!("{p}.bn1.gamma"), d, 1.0), init.zeros(format!("{p}.bn1.beta"), d)),
                    ff1: (init.matrix(format!("{p}.ff1.w"), d, config.d_ff), init.zeros(format!("{p}.ff1.b"), config.d_ff)),
                    ff2: (init.matrix(format!("{p}.ff2.w"), config.d_ff, d), init.zeros(format!("{p}.ff2.b"), d)),
                    bn2: (init.filled(format!("{p}.bn2.gamma"), d, 1.0), init.zeros(format!("{p}.bn2.beta"), d)),
                }
            })
            .collect();
        let context = (
            init.matrix("decoder.context.w".into(), 2 * d + CONTEXT_FEATURES, d),
            init.zeros("decoder.context.b".into(), d),
        );
        let glimpse = init.mha("decoder.glimpse", d, config.n_heads, DECODER_SOURCES, config.decoder_quantum);
        let pointer = init.matrix("decoder.pointer".into(), d, d);
        let pointer_sources = (0..POINTER_SOURCES)
            .map(|k| init.matrix(format!("decoder.pointer_source{k}"), 1, d))
            .collect();
        Ok(Policy {
            bn: vec![BnRunning::new(d); 2 * ENCODER_LAYERS],
            config,
            store,
            embed,
            layers,
            context,
            glimpse,
            pointer,
            pointer_sources,
        })
    }

    pub fn seeded(config: PolicyConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn heads_mut(&mut self) -> impl Iterator<Item = &mut HeadParams> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.mha.heads.iter_mut())
            .chain(self.glimpse.heads.iter_mut())
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadParams> {
        self.layers.iter().flat_map(|l| l.mha.heads.iter()).chain(self.glimpse.heads.iter())
    }

    /// The same network with every circuit removed, so quantum heads run as their
    /// classical twins.
    pub fn classical_twin(&self) -> Policy {
        let mut p = self.clone();
        for h in p.heads_mut() {
            h.theta_query = None;
            h.theta_key = None;
            h.theta_value = None;
        }
        p
    }

    pub fn circuit_params(&self) -> Vec<ParamId> {
        self.heads()
            .flat_map(|h| [h.theta_query, h.theta_key, h.theta_value])
            .flatten()
            .collect()
    }

    /// Linear embedding of `(x, y, δ_in, δ_out)` per node, all instances stacked by row.
    pub fn embed_inputs(&self, tape: &mut Tape, instances: &[&Instance]) -> Result<Var> {
        let mut features = Vec::new();
        for inst in instances {
            let (out, inn, _) = initial_demand(inst, self.config.demand_scale);
            for (i, c) in inst.coordinates().iter().enumerate() {
                features.extend_from_slice(&[c[0], c[1], inn[i], out[i]]);
            }
        }
        let total = features.len() / NODE_FEATURES;
        if total == 0 {
            return Err(Error::Argument("cannot encode an empty batch".into()));
        }
        let x = tape.constant(Tensor::new(vec![total, NODE_FEATURES], features)?);
        let w = tape.param(&self.store, self.embed.0);
        let b = tape.param(&self.store, self.embed.1);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Encodes a batch jointly; batch norm in training mode pools statistics over
    /// every node of every instance. Returns the statistics of each norm layer.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        instances: &[&Instance],
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<Encoded>, Vec<BatchStats>)> {
        let scale = self.config.demand_scale;
        let per: Vec<_> = instances
            .iter()
            .map(|inst| {
                let (out, inn, mat) = initial_demand(inst, scale);
                (inst.n(), out, inn, mat)
            })
            .collect();
        let mut h = self.embed_inputs(tape, instances)?;

        let mut ctx = Vec::with_capacity(per.len());
        for (n, out, inn, mat) in &per {
            let gate = DemandGate::new(*n, *n, mat, true, |i, j| i == j);
            let sources = vec![column(tape, out.clone()), column(tape, inn.clone())];
            ctx.push((gate, sources));
        }

        let mut stats = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(per.len());
            for (k, (n, ..)) in per.iter().enumerate() {
                let hb = tape.slice_rows(h, offset, *n)?;
                parts.push(mha(tape, &self.store, &layer.mha, hb, hb, &ctx[k].1, &ctx[k].0)?);
                offset += n;
            }
            let att = tape.concat_rows(&parts)?;
            let res = tape.add(h, att)?;
            let (g1, b1) = (tape.param(&self.store, layer.bn1.0), tape.param(&self.store, layer.bn1.1));
            let (h1, s1) = batch_norm(tape, res, g1, b1, &self.bn[2 * l], training)?;

            let w1 = tape.param(&self.store, layer.ff1.0);
            let c1 = tape.param(&self.store, layer.ff1.1);
            let z = tape.matmul(h1, w1)?;
            let z = tape.add_row(z, c1)?;
            let z = tape.relu(z);
            let z = tape.dropout(z, self.config.dropout, training, rng);
            let w2 = tape.param(&self.store, layer.ff2.0);
            let c2 = tape.param(&self.store, layer.ff2.1);
            let z = tape.matmul(z, w2)?;
            let z = tape.add_row(z, c2)?;
            let res = tape.add(h1, z)?;
            let (g2, b2) = (tape.param(&self.store, layer.bn2.0), tape.param(&self.store, layer.bn2.1));
            let (h2, s2) = batch_norm(tape, res, g2, b2, &self.bn[2 * l + 1], training)?;
            stats.extend(s1);
            stats.extend(s2);
            h = h2;
        }

        let mut offset = 0;
        let mut encoded = Vec::with_capacity(per.len());
        for (n, ..) in &per {
            let nodes = tape.slice_rows(h, offset, *n)?;
            let mean = tape.mean_rows(nodes);
            encoded.push(Encoded { nodes, mean });
            offset += n;
        }
        Ok((encoded, stats))
    }

    /// Folds training-mode statistics (in encoder order) into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.bn.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Action probabilities `1 × n` for truck `m`, or `None` when it has no feasible move.
    pub fn decode_step(&self, tape: &mut Tape, enc: Encoded, state: &EnvState, m: usize) -> Result<Option<Var>> {
        let feasible = state.feasibility_mask(m);
        if !feasible.iter().any(|&f| f) {
            return Ok(None);
        }
        let n = state.n();
        let d = self.config.d;
        let scale = self.config.demand_scale;
        let truck = &state.trucks[m];
        let my = state.myopic();
        let horizon = state.instance().horizon_s;
        let feats = vec![
            (truck.capacity - truck.load) / truck.capacity,
            if horizon > 0.0 { (horizon - truck.clock) / horizon } else { 0.0 },
            my.delta_out.iter().sum::<f64>() / scale,
        ];
        let fv = tape.constant(Tensor::new(vec![1, CONTEXT_FEATURES], feats)?);
        let here = tape.slice_rows(enc.nodes, truck.position, 1)?;
        let cat = tape.concat_cols(&[enc.mean, here, fv])?;
        let cw = tape.param(&self.store, self.context.0);
        let cb = tape.param(&self.store, self.context.1);
        let q = tape.matmul(cat, cw)?;
        let q = tape.add_row(q, cb)?;

        let sources = vec![
            column(tape, my.delta_out.iter().map(|v| v / scale).collect()),
            column(tape, my.delta_in.iter().map(|v| v / scale).collect()),
            column(tape, my.eps[m].iter().map(|v| v / scale).collect()),
        ];
        let row: Vec<f64> = (0..n).map(|j| my.d(truck.position, j) / scale).collect();
        let mask: Vec<f64> = feasible.iter().map(|&f| if f { 0.0 } else { MASK_SENTINEL }).collect();
        let mut gate = DemandGate::new(1, n, &row, false, |_, _| true);
        gate.extra = mask.clone();
        let glimpse = mha(tape, &self.store, &self.glimpse, q, enc.nodes, &sources, &gate)?;

        let mut pointer_cols = sources;
        pointer_cols.push(column(tape, row));
        let travel = (0..n)
            .map(|j| if horizon > 0.0 { state.instance().time(truck.position, j) / horizon } else { 0.0 })
            .collect();
        pointer_cols.push(column(tape, travel));
        let ps: Vec<(Var, ParamId)> = pointer_cols.into_iter().zip(self.pointer_sources.iter().copied()).collect();
        let keys = project(tape, &self.store, enc.nodes, self.pointer, &ps, None)?;
        let kt = tape.transpose(keys);
        let logits = tape.matmul(glimpse, kt)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        let logits = tape.tanh(logits);
        let logits = tape.scale(logits, self.config.logit_clip);
        let probs = tape.softmax_rows(logits, &Tensor::new(vec![1, n], mask)?)?;
        Ok(Some(probs))
    }

    /// Runs one episode on `tape` from an encoded instance.
    pub fn run_episode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        enc: Encoded,
        instance: Arc<Instance>,
        mode: &DecodeMode,
        literal_log_sum: bool,
        rng: &mut R,
    ) -> Result<Episode> {
        let mut state = EnvState::new(instance)?;
        let mut actions = Vec::new();
        let mut step_probs = Vec::new();
        let mut picks = Vec::new();
        while let Some(m) = state.next_active() {
            if actions.len() >= MAX_STEPS {
                return Err(Error::Argument("episode exceeded the step limit".into()));
            }
            let probs = self
                .decode_step(tape, enc, &state, m)?
                .expect("next_active guarantees a feasible move");
            let p = tape.value(probs).data().to_vec();
            let z = match mode {
                DecodeMode::Greedy => p
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0,
                DecodeMode::Sample => WeightedIndex::new(&p)
                    .map_err(|e| Error::Argument(format!("bad action distribution: {e}")))?
                    .sample(rng),
                DecodeMode::Replay(seq) => *seq.get(actions.len()).ok_or_else(|| {
                    Error::Argument(format!("replay sequence ended after {} actions", seq.len()))
                })?,
            };
            if p[z] <= 0.0 {
                return Err(Error::InfeasibleMove(format!("node {z} is not a feasible choice for truck {m}")));
            }
            picks.push(tape.pick(probs, z)?);
            step_probs.push(p[z]);
            actions.push((m, z));
            state.step(m, z)?;
        }
        let log_prob = if picks.is_empty() {
            None
        } else if literal_log_sum {
            let all = tape.concat_cols(&picks)?;
            let s = tape.sum(all);
            Some(tape.ln(s))
        } else {
            let all = tape.concat_cols(&picks)?;
            let logs = tape.ln(all);
            Some(tape.sum(logs))
        };
        Ok(Episode {
            state,
            actions,
            step_probs,
            log_prob,
        })
    }

    /// Evaluation-mode rollout on a private tape.
    pub fn rollout(&self, instance: Arc<Instance>, mode: DecodeMode, seed: u64) -> Result<Rollout> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let (enc, _) = self.encode(&mut tape, &[instance.as_ref()], false, &mut rng)?;
        let ep = self.run_episode(&mut tape, enc[0], instance, &mode, false, &mut rng)?;
        let log_prob = ep.log_prob.map(|v| tape.value(v).data()[0]).unwrap_or(0.0);
        Ok(Rollout {
            reward: ep.state.episode_reward(0.0),
            coverage: ep.state.coverage(),
            state: ep.state,
            actions: ep.actions,
            step_probs: ep.step_probs,
            log_prob,
        })
    }

    /// `Σ_t ln π` of a forced node sequence, recorded on `tape` for differentiation.
    pub fn replay_log_prob(&self, tape: &mut Tape, instance: Arc<Instance>, nodes: &[usize], training: bool) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (enc, _) = self.encode(tape, &[instance.as_ref()], training, &mut rng)?;
        let ep = self.run_episode(tape, enc[0], instance, &DecodeMode::Replay(nodes.to_vec()), false, &mut rng)?;
        ep.log_prob
            .ok_or_else(|| Error::Argument("replayed episode made no decisions".into()))
    }
}
