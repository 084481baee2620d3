//! Policy-gradient training against a lagged greedy baseline.

mod adam;
mod sampler;
mod stats;

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape};
use crate::env::{EnvState, Instance};
use crate::error::{Error, Result};
use crate::policy::{DecodeMode, Policy};
use crate::seeds::derive_seed;

pub use adam::{clip_grad_norm, Adam};
pub use sampler::SamplerConfig;
pub use stats::{paired_t_test, percentile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    /// Level of the one-sided paired t-test that promotes the live policy to baseline.
    pub significance: f64,
    /// Held-out instances used by the baseline test.
    pub eval_size: usize,
    /// Cost added per unit of unmet demand fraction.
    pub unmet_penalty: f64,
    pub max_grad_norm: Option<f64>,
    /// Differentiate `ln Σ_t π_t` instead of `Σ_t ln π_t`.
    pub literal_log_sum: bool,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            batches_per_epoch: 10,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            significance: 0.05,
            eval_size: 128,
            unmet_penalty: 1.0,
            max_grad_norm: Some(1.0),
            literal_log_sum: false,
            checkpoint_every: 0,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 || self.eval_size == 0 {
            return Err(Error::Argument(
                "epochs, batch_size, batches_per_epoch and eval_size must be at least 1".into(),
            ));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Argument("significance must lie strictly between 0 and 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.unmet_penalty >= 0.0) {
            return Err(Error::Argument("learning_rate must be positive and unmet_penalty non-negative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Argument("lr_decay must lie in (0, 1]".into()));
        }
        if matches!(self.max_grad_norm, Some(g) if !(g > 0.0)) {
            return Err(Error::Argument("max_grad_norm must be positive".into()));
        }
        self.sampler.validate()
    }
}

/// Dimensionless episode cost: total route time over the horizon plus a penalty
/// on the fraction of demand left unmet.
pub fn episode_cost(state: &EnvState, unmet_penalty: f64) -> f64 {
    let horizon = state.instance().horizon_s;
    state.total_route_time() / horizon + unmet_penalty * (1.0 - state.coverage())
}

/// Greedy evaluation-mode costs, computed in parallel and returned in input order.
pub fn greedy_costs(policy: &Policy, instances: &[Arc<Instance>], unmet_penalty: f64) -> Result<Vec<f64>> {
    instances
        .par_iter()
        .map(|inst| {
            let r = policy.rollout(inst.clone(), DecodeMode::Greedy, 0)?;
            Ok(episode_cost(&r.state, unmet_penalty))
        })
        .collect()
}

/// Lagged copy of the live policy used for the advantage baseline.
#[derive(Clone, Debug)]
pub struct BaselineAgent {
    pub policy: Policy,
    /// Greedy costs of `policy` on the evaluation set.
    pub eval_costs: Vec<f64>,
    /// Mean evaluation cost at adoption, one entry per snapshot taken.
    pub history: Vec<f64>,
}

impl BaselineAgent {
    pub fn new(policy: Policy, eval_set: &[Arc<Instance>], unmet_penalty: f64) -> Result<Self> {
        let eval_costs = greedy_costs(&policy, eval_set, unmet_penalty)?;
        let mean = eval_costs.iter().sum::<f64>() / eval_costs.len().max(1) as f64;
        Ok(BaselineAgent {
            policy,
            eval_costs,
            history: vec![mean],
        })
    }
}

/// True iff the live policy's greedy costs are significantly lower than the
/// baseline's on the evaluation set. Also returns the live costs.
pub fn baseline_test(
    live: &Policy,
    baseline: &BaselineAgent,
    eval_set: &[Arc<Instance>],
    significance: f64,
    unmet_penalty: f64,
) -> Result<(bool, Vec<f64>)> {
    if eval_set.is_empty() {
        return Err(Error::Argument("baseline test needs a non-empty evaluation set".into()));
    }
    let costs = greedy_costs(live, eval_set, unmet_penalty)?;
    Ok((paired_t_test(&costs, &baseline.eval_costs, significance), costs))
}

/// Result of one policy-gradient evaluation over a batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// `mean_b (L_b − L_BL,b) · log π_b`.
    pub loss: f64,
    /// Gradient of `loss`, one buffer per parameter tensor in store order.
    pub grads: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub coverages: Vec<f64>,
    pub route_times: Vec<f64>,
    pub actions: Vec<Vec<(usize, usize)>>,
    /// Training-mode normalisation statistics, one per norm layer.
    pub stats: Vec<BatchStats>,
}

/// Samples one episode per instance with the live policy (training mode, joint
/// batch) and differentiates the advantage-weighted log-likelihood.
pub fn policy_gradient(
    policy: &Policy,
    instances: &[Arc<Instance>],
    baseline_costs: &[f64],
    seed: u64,
    unmet_penalty: f64,
    literal_log_sum: bool,
) -> Result<BatchOutcome> {
    if instances.len() != baseline_costs.len() || instances.is_empty() {
        return Err(Error::dim(
            "policy_gradient",
            format!("{} instances but {} baseline costs", instances.len(), baseline_costs.len()),
        ));
    }
    let b = instances.len();
    let mut tape = Tape::new();
    let refs: Vec<&Instance> = instances.iter().map(|i| i.as_ref()).collect();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    let (enc, stats) = policy.encode(&mut tape, &refs, true, &mut dropout_rng)?;

    let mut out = BatchOutcome {
        loss: 0.0,
        grads: policy.store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        costs: Vec::with_capacity(b),
        coverages: Vec::with_capacity(b),
        route_times: Vec::with_capacity(b),
        actions: Vec::with_capacity(b),
        stats,
    };
    let mut log_probs = Vec::new();
    let mut weights = Vec::new();
    for (k, inst) in instances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64]));
        let ep = policy.run_episode(&mut tape, enc[k], inst.clone(), &DecodeMode::Sample, literal_log_sum, &mut rng)?;
        let cost = episode_cost(&ep.state, unmet_penalty);
        if let Some(lp) = ep.log_prob {
            log_probs.push(lp);
            weights.push((cost - baseline_costs[k]) / b as f64);
        }
        out.costs.push(cost);
        out.coverages.push(ep.state.coverage());
        out.route_times.push(ep.state.total_route_time());
        out.actions.push(ep.actions);
    }
    if log_probs.is_empty() {
        return Ok(out);
    }
    let lp = tape.concat_cols(&log_probs)?;
    let weighted = tape.mul_const(lp, weights)?;
    let loss = tape.sum(weighted);
    out.loss = tape.value(loss).data()[0];
    if !out.loss.is_finite() {
        return Err(Error::Divergence(format!("loss evaluated to {}", out.loss)));
    }
    let grads = tape.backward(loss);
    for (id, g) in tape.param_grads(&grads) {
        out.grads[id.0].iter_mut().zip(g).for_each(|(a, v)| *a += v);
    }
    if out.grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok(out)
}

/// Per-epoch training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_cost: f64,
    pub mean_coverage: f64,
    pub mean_time_s: f64,
    pub baseline_updated: bool,
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Training state between epochs.
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    pub baseline: BaselineAgent,
    pub eval_set: Vec<Arc<Instance>>,
    pub metrics: Vec<EpochMetrics>,
    optimizer: Adam,
}

impl Trainer {
    pub fn new(config: TrainConfig, policy: Policy) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
        let eval_set: Vec<Arc<Instance>> =
            (0..config.eval_size).map(|_| Arc::new(config.sampler.sample(&mut rng))).collect();
        let baseline = BaselineAgent::new(policy.clone(), &eval_set, config.unmet_penalty)?;
        Ok(Trainer {
            optimizer: Adam::new(config.learning_rate),
            config,
            policy,
            baseline,
            eval_set,
            metrics: Vec::new(),
        })
    }

    /// 95th percentile of the demand component magnitudes in the evaluation set.
    pub fn clip_value(&self) -> f64 {
        let values: Vec<f64> = self
            .eval_set
            .iter()
            .flat_map(|inst| inst.demand_tensors())
            .flat_map(|t| t.iter().map(|(_, v)| v).collect::<Vec<_>>())
            .collect();
        percentile(&values, 0.95).unwrap_or(self.config.sampler.volume_max)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.metrics.len() + 1;
        self.optimizer.lr = self.config.learning_rate * self.config.lr_decay.powi(epoch as i32 - 1);
        let cfg = &self.config;
        let (mut cost, mut coverage, mut time, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in 0..cfg.batches_per_epoch {
            let path = [1, epoch as u64, batch as u64];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &path));
            let instances: Vec<Arc<Instance>> =
                (0..cfg.batch_size).map(|_| Arc::new(cfg.sampler.sample(&mut rng))).collect();
            let bl = greedy_costs(&self.baseline.policy, &instances, cfg.unmet_penalty)?;
            let seed = derive_seed(cfg.seed, &[2, epoch as u64, batch as u64]);
            let out = policy_gradient(&self.policy, &instances, &bl, seed, cfg.unmet_penalty, cfg.literal_log_sum)
                .map_err(|e| match e {
                    Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}, batch {batch}: {msg}")),
                    other => other,
                })?;

            self.policy.store.zero_grads();
            let ids: Vec<_> = self.policy.store.ids().collect();
            for (id, g) in ids.into_iter().zip(&out.grads) {
                self.policy.store.get_mut(id).accumulate_grad(g)?;
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut self.policy.store, max);
            }
            self.optimizer.step(&mut self.policy.store)?;
            self.policy.store.zero_grads();
            if !self.policy.store.all_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}, batch {batch}: parameters became non-finite"
                )));
            }
            self.policy.update_running_stats(&out.stats);

            cost += out.costs.iter().sum::<f64>();
            coverage += out.coverages.iter().sum::<f64>();
            time += out.route_times.iter().sum::<f64>();
            count += out.costs.len();
        }

        let (updated, live_costs) = baseline_test(
            &self.policy,
            &self.baseline,
            &self.eval_set,
            cfg.significance,
            cfg.unmet_penalty,
        )?;
        if updated {
            let mean = live_costs.iter().sum::<f64>() / live_costs.len() as f64;
            self.baseline.policy = self.policy.clone();
            self.baseline.eval_costs = live_costs;
            self.baseline.history.push(mean);
            log::info!("epoch {epoch}: baseline replaced (eval cost {mean:.5})");
        }
        let n = count.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            mean_cost: cost / n,
            mean_coverage: coverage / n,
            mean_time_s: time / n,
            baseline_updated: updated,
        };
        log::debug!("{m:?}");
        self.metrics.push(m.clone());
        Ok(m)
    }
}

/// Trains for `config.epochs` epochs, calling `observer` after each one.
pub fn train<F>(config: TrainConfig, policy: Policy, mut observer: F) -> Result<Trainer>
where
    F: FnMut(&EpochMetrics, &Trainer) -> Result<()>,
{
    let mut trainer = Trainer::new(config, policy)?;
    for _ in 0..trainer.config.epochs {
        let m = trainer.run_epoch()?;
        observer(&m, &trainer)?;
    }
    Ok(trainer)
}
