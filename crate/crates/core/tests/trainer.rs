use std::sync::Arc;

use qvrp::autodiff::{ParamStore, Tape, Tensor};
use qvrp::env::*;
use qvrp::policy::{Policy, PolicyConfig, QuantumHeads};
use qvrp::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_policy(seed: u64) -> Policy {
    Policy::seeded(
        PolicyConfig {
            d: 8,
            d_ff: 16,
            n_heads: 2,
            encoder_quantum: QuantumHeads::all(1),
            decoder_quantum: QuantumHeads::all(1),
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 6,
        batches_per_epoch: 2,
        eval_size: 8,
        seed,
        ..Default::default()
    }
}

fn two_node_instance() -> Arc<Instance> {
    Arc::new(Instance {
        nodes: (0..2)
            .map(|id| NodeSpec {
                id,
                name: String::new(),
                x: Some(id as f64),
                y: Some(0.0),
            })
            .collect(),
        time_matrix: vec![vec![0.0, 50.0], vec![50.0, 0.0]],
        trucks: vec![TruckSpec { capacity: 10.0, start: 0 }],
        horizon_s: 1000.0,
        demand: vec![
            DemandSpec { kind: DemandKind::Direct, nodes: vec![0, 1], volume: 1.0 },
            DemandSpec { kind: DemandKind::Direct, nodes: vec![1, 0], volume: 2.0 },
        ],
    })
}

fn scalar_store(value: f64) -> (ParamStore, qvrp::autodiff::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(value));
    (store, id)
}

#[test]
fn adam_matches_hand_computation() {
    let (mut store, id) = scalar_store(1.0);
    let mut adam = Adam::new(0.1);
    let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
    for (t, g) in [0.5, -0.2, 0.3].into_iter().enumerate() {
        store.zero_grads();
        store.get_mut(id).accumulate_grad(&[g]).unwrap();
        adam.step(&mut store).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let k = t as i32 + 1;
        x -= 0.1 * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        assert!((store.get(id).data()[0] - x).abs() < 1e-15);
    }
    // first step moves by almost exactly lr regardless of gradient scale
    let (mut store, id) = scalar_store(0.0);
    let mut adam = Adam::new(0.01);
    store.get_mut(id).accumulate_grad(&[1e-3]).unwrap();
    adam.step(&mut store).unwrap();
    assert!((store.get(id).data()[0] + 0.01).abs() < 1e-7);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let (mut store, id) = scalar_store(0.7);
    let mut adam = Adam::new(0.1);
    for _ in 0..5 {
        adam.step(&mut store).unwrap();
    }
    assert_eq!(store.get(id).data()[0], 0.7);
    assert_eq!(adam.steps(), 5);
}

#[test]
fn adam_constant_gradient_moves_against_its_sign() {
    for g in [2.0, -0.3] {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(0.01);
        let mut prev = 0.0;
        for _ in 0..200 {
            store.zero_grads();
            store.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam.step(&mut store).unwrap();
            let x = store.get(id).data()[0];
            assert_eq!((x - prev).signum(), -f64::signum(g));
            prev = x;
        }
    }
}

#[test]
fn gradient_clipping_caps_the_global_norm() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![0.0, 0.0]));
    let b = store.add("b", Tensor::scalar(0.0));
    store.get_mut(a).accumulate_grad(&[3.0, 0.0]).unwrap();
    store.get_mut(b).accumulate_grad(&[4.0]).unwrap();
    assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
    assert!((store.get(a).grad().unwrap()[0] - 0.6).abs() < 1e-15);
    assert!((store.get(b).grad().unwrap()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn t_test_agrees_with_tabulated_critical_values() {
    // one-sided 5% critical values of Student's t
    let table = [(10usize, 1.833), (30, 1.699)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut decisions = [0, 0];
    for &(n, crit) in &table {
        for trial in 0..400 {
            let effect = -0.6 * (trial % 4) as f64 / 3.0;
            let base: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
            let live: Vec<f64> = base
                .iter()
                .map(|b| b + effect + rng.random_range(-1.0..1.0))
                .collect();
            let d: Vec<f64> = live.iter().zip(&base).map(|(a, b)| a - b).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let t = mean / (sd / (n as f64).sqrt());
            if (t + crit).abs() < 0.01 {
                continue;
            }
            let expect = t < -crit;
            assert_eq!(paired_t_test(&live, &base, 0.05), expect, "n={n} t={t}");
            decisions[expect as usize] += 1;
        }
    }
    assert!(decisions[0] > 100 && decisions[1] > 100);
}

#[test]
fn equal_costs_give_zero_gradient() {
    let sampler = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let instances: Vec<Arc<Instance>> = (0..5).map(|_| Arc::new(sampler.sample(&mut rng))).collect();
    let p = tiny_policy(2);
    let first = policy_gradient(&p, &instances, &[0.0; 5], 7, 1.0, false).unwrap();
    assert!(first.grads.iter().flatten().any(|&g| g != 0.0));
    let again = policy_gradient(&p, &instances, &first.costs, 7, 1.0, false).unwrap();
    assert_eq!(again.actions, first.actions);
    assert_eq!(again.loss, 0.0);
    assert!(again.grads.iter().flatten().all(|&g| g == 0.0));
}

#[test]
fn single_node_instances_do_not_move_the_policy() {
    let mut cfg = tiny_config(3);
    cfg.sampler.nodes = 1;
    let p = tiny_policy(3);
    let trainer = train(cfg, p.clone(), |_, _| Ok(())).unwrap();
    assert_eq!(trainer.policy.store, p.store);
    for m in &trainer.metrics {
        assert_eq!((m.mean_cost, m.mean_coverage, m.mean_time_s), (0.0, 1.0, 0.0));
        assert!(!m.baseline_updated);
    }
}

#[test]
fn metrics_stream_is_reproducible_across_thread_counts() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let t = train(tiny_config(4), tiny_policy(4), |_, _| Ok(())).unwrap();
            let mut csv = Vec::new();
            write_metrics_csv(&t.metrics, &mut csv).unwrap();
            (csv, t.policy.store)
        })
    };
    let (a, pa) = run(1);
    let (b, pb) = run(1);
    let (c, pc) = run(4);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(pa, pb);
    assert_eq!(pa, pc);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("epoch,mean_cost,mean_coverage,mean_time_s,baseline_updated\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn baseline_snapshots_only_ever_improve() {
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        batches_per_epoch: 3,
        eval_size: 24,
        learning_rate: 3e-3,
        seed: 5,
        ..Default::default()
    };
    let mut previous = None;
    let t = train(cfg, tiny_policy(5), |m, t| {
        let mean = t.baseline.eval_costs.iter().sum::<f64>() / t.baseline.eval_costs.len() as f64;
        if let Some(prev) = previous {
            if m.baseline_updated {
                assert!(mean < prev);
            } else {
                assert_eq!(mean, prev);
            }
        }
        previous = Some(mean);
        Ok(())
    })
    .unwrap();
    assert!(t.baseline.history.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(t.baseline.history.len(), 1 + t.metrics.iter().filter(|m| m.baseline_updated).count());
}

#[test]
fn baseline_test_rejects_identical_parameters() {
    let sampler = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eval: Vec<Arc<Instance>> = (0..10).map(|_| Arc::new(sampler.sample(&mut rng))).collect();
    let p = tiny_policy(6);
    let bl = BaselineAgent::new(p.clone(), &eval, 1.0).unwrap();
    let (pass, costs) = baseline_test(&p, &bl, &eval, 0.05, 1.0).unwrap();
    assert!(!pass);
    assert_eq!(costs, bl.eval_costs);
    assert!(baseline_test(&p, &bl, &[], 0.05, 1.0).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { significance: 1.0, ..Default::default() },
        TrainConfig { learning_rate: -1.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    TrainConfig::default().validate().unwrap();
}

fn trajectories(state: &EnvState, prefix: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, f64)>) {
    let mut s = state.clone();
    let Some(m) = s.next_active() else {
        out.push((prefix.clone(), episode_cost(&s, 1.0)));
        return;
    };
    for z in 0..s.n() {
        if s.is_feasible(m, z) {
            let (next, _) = s.stepped(m, z).unwrap();
            prefix.push(z);
            trajectories(&next, prefix, out);
            prefix.pop();
        }
    }
}

#[test]
fn sampled_gradient_is_unbiased() {
    let inst = two_node_instance();
    let p = tiny_policy(8);
    let baseline = 0.1;

    let mut paths = Vec::new();
    trajectories(&EnvState::new(inst.clone()).unwrap(), &mut Vec::new(), &mut paths);
    assert_eq!(paths.len(), 2);

    // exact expectation over the enumerated trajectories
    let mut exact = vec![0.0; p.store.scalar_count()];
    let mut per_path = Vec::new();
    let mut total_p = 0.0;
    for (nodes, cost) in &paths {
        let mut tape = Tape::new();
        let lp = p.replay_log_prob(&mut tape, inst.clone(), nodes, true).unwrap();
        let prob = tape.value(lp).data()[0].exp();
        let grads = tape.backward(lp);
        let mut flat = vec![0.0; p.store.scalar_count()];
        let offsets: Vec<usize> = p
            .store
            .iter()
            .scan(0, |o, (_, _, t)| {
                let here = *o;
                *o += t.len();
                Some(here)
            })
            .collect();
        for (id, g) in tape.param_grads(&grads) {
            for (k, v) in g.iter().enumerate() {
                flat[offsets[id.0] + k] += v;
            }
        }
        let g: Vec<f64> = flat.iter().map(|v| (cost - baseline) * v).collect();
        exact.iter_mut().zip(&g).for_each(|(e, v)| *e += prob * v);
        per_path.push((prob, g));
        total_p += prob;
    }
    assert!((total_p - 1.0).abs() < 1e-12);
    assert!(per_path.iter().all(|(q, _)| *q > 0.05 && *q < 0.95));

    let norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    let dir: Vec<f64> = exact.iter().map(|v| v / norm).collect();
    let dot = |g: &[f64]| g.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
    let second: f64 = per_path.iter().map(|(q, g)| q * dot(g).powi(2)).sum();
    let samples = 100_000;
    let se = ((second - norm * norm) / samples as f64).sqrt();

    let batch = 1000;
    let instances = vec![inst; batch];
    let mut projected = 0.0;
    for k in 0..samples / batch {
        let out = policy_gradient(&p, &instances, &vec![baseline; batch], k as u64, 1.0, false).unwrap();
        let flat: Vec<f64> = out.grads.into_iter().flatten().collect();
        projected += dot(&flat);
    }
    projected /= (samples / batch) as f64;
    assert!((projected - norm).abs() < 3.0 * se, "{projected} vs {norm} (se {se})");
}

#[test]
fn loss_weights_the_log_likelihood_by_the_advantage() {
    let inst = two_node_instance();
    let p = tiny_policy(9);
    let a = policy_gradient(&p, &[inst.clone()], &[0.0], 1, 1.0, false).unwrap();
    let b = policy_gradient(&p, &[inst.clone()], &[0.0], 1, 1.0, true).unwrap();
    assert_eq!(a.actions, b.actions);
    let nodes: Vec<usize> = a.actions[0].iter().map(|x| x.1).collect();
    let mut tape = Tape::new();
    let lp = p.replay_log_prob(&mut tape, inst, &nodes, true).unwrap();
    let sum_logs = tape.value(lp).data()[0];
    assert!((a.loss - a.costs[0] * sum_logs).abs() < 1e-12);
    // ln Σ π ≥ max ln π ≥ Σ ln π, strictly once two decisions are uncertain
    assert!(b.loss / b.costs[0] > a.loss / a.costs[0]);
}

#[test]
fn clip_value_is_a_demand_percentile() {
    let cfg = TrainConfig {
        eval_size: 40,
        ..tiny_config(10)
    };
    let t = Trainer::new(cfg, tiny_policy(10)).unwrap();
    let c = t.clip_value();
    assert!((1.0..=5.0).contains(&c));
    let values: Vec<f64> = t
        .eval_set
        .iter()
        .flat_map(|i| i.demand.iter().map(|d| d.volume))
        .collect();
    let below = values.iter().filter(|&&v| v <= c).count() as f64 / values.len() as f64;
    assert!(below >= 0.95);
}
