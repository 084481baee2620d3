use std::sync::Arc;

use qvrp::autodiff::{ParamStore, Tape, Tensor};
use qvrp::env::*;
use qvrp::policy::*;
use qvrp::qonn::{extract_orthogonal_matrix, PyramidCircuit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance<R: Rng>(rng: &mut R, n: usize, trucks: usize, tuples: usize) -> Instance {
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let time_matrix = pts
        .iter()
        .map(|a| {
            pts.iter()
                .map(|b| 1.0 + 3600.0 * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .collect::<Vec<f64>>()
        })
        .enumerate()
        .map(|(i, mut row)| {
            row[i] = 0.0;
            row
        })
        .collect();
    let mut demand = Vec::new();
    while demand.len() < tuples {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            demand.push(DemandSpec {
                kind: DemandKind::Direct,
                nodes: vec![a, b],
                volume: rng.random_range(1.0..5.0),
            });
        }
    }
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
        trucks: vec![TruckSpec { capacity: 10.0, start: 0 }; trucks],
        horizon_s: 57_600.0,
        demand,
    }
}

fn permuted(inst: &Instance, perm: &[usize]) -> Instance {
    // node i of the original becomes node perm[i]
    let n = inst.n();
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Instance {
        nodes: (0..n)
            .map(|k| NodeSpec {
                id: k,
                ..inst.nodes[inv[k]].clone()
            })
            .collect(),
        time_matrix: (0..n)
            .map(|a| (0..n).map(|b| inst.time_matrix[inv[a]][inv[b]]).collect())
            .collect(),
        trucks: inst.trucks.clone(),
        horizon_s: inst.horizon_s,
        demand: inst
            .demand
            .iter()
            .map(|d| DemandSpec {
                nodes: d.nodes.iter().map(|&v| perm[v]).collect(),
                ..d.clone()
            })
            .collect(),
    }
}

fn small_config(quantum: usize) -> PolicyConfig {
    PolicyConfig {
        d: 16,
        d_ff: 32,
        n_heads: 2,
        encoder_quantum: QuantumHeads::all(quantum),
        decoder_quantum: QuantumHeads::all(quantum),
        ..Default::default()
    }
}

fn encode_eval(policy: &Policy, inst: &Instance, training: bool) -> Tensor {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (enc, _) = policy.encode(&mut tape, &[inst], training, &mut rng).unwrap();
    tape.value(enc[0].nodes).clone()
}

#[test]
fn zero_embedding_weights_give_zero_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inst = instance(&mut rng, 5, 1, 3);
    let mut p = Policy::seeded(small_config(0), 1).unwrap();
    p.store.get_mut(p.embed.0).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let h = p.embed_inputs(&mut tape, &[&inst]).unwrap();
    assert_eq!(tape.value(h).shape(), &[5, 16]);
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));

    // an identity block on the first four columns reads the features back
    let w = p.store.get_mut(p.embed.0);
    for k in 0..4 {
        w.data_mut()[k * 16 + k] = 1.0;
    }
    let mut tape = Tape::new();
    let h = p.embed_inputs(&mut tape, &[&inst]).unwrap();
    let coords = inst.coordinates();
    for i in 0..5 {
        assert_eq!(tape.value(h).at(i, 0), coords[i][0]);
        assert_eq!(tape.value(h).at(i, 1), coords[i][1]);
    }
}

#[test]
fn identical_keys_split_attention_evenly() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[vec![0.5, 0.7], vec![0.5, 0.7]]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let gate = DemandGate::new(1, 2, &[0.0, 0.0], false, |_, _| true);
    let out = head_attention(&mut tape, &store, q, k, v, a, &gate).unwrap();
    assert_eq!(tape.value(out).data(), &[0.5, 0.5]);
}

#[test]
fn hard_mask_zeroes_attention_to_demandless_pairs() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![5.0, 5.0]]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
    // D_01 = 0 so row 0 may not attend to node 1; D_10 > 0
    let gate = DemandGate::new(2, 2, &[0.0, 0.0, 3.0, 0.0], true, |i, j| i == j);
    let out = head_attention(&mut tape, &store, q, k, v, a, &gate).unwrap();
    assert_eq!(tape.value(out).at(0, 0), 1.0);

    // with A_mask = A_log = 0 the same gate is inert
    let plain = store.add("plain", Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let out = head_attention(&mut tape, &store, q, k, v, plain, &gate).unwrap();
    assert!(tape.value(out).at(0, 0) > 1.0);
}

#[test]
fn basic_coefficients_reduce_to_plain_dot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let rand_m = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let (qt, kt, vt) = (rand_m(&mut rng, 3, 4), rand_m(&mut rng, 3, 4), rand_m(&mut rng, 3, 2));
    let demand: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..3.0)).collect();
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
    let gate = DemandGate::new(3, 3, &demand, true, |i, j| i == j);
    let out = head_attention(&mut tape, &store, q, k, v, a, &gate).unwrap();
    for i in 0..3 {
        let u: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| qt.at(i, c) * kt.at(j, c)).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = u.iter().map(|x| x.exp()).sum();
        for c in 0..2 {
            let expect: f64 = (0..3).map(|j| u[j].exp() / z * vt.at(j, c)).sum();
            assert!((tape.value(out).at(i, c) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_shape_and_eval_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Policy::seeded(small_config(1), 3).unwrap();
    for n in [1, 2, 5, 9] {
        let inst = instance(&mut rng, n, 1, n.saturating_sub(1).max(0));
        let a = encode_eval(&p, &inst, false);
        let b = encode_eval(&p, &inst, false);
        assert_eq!(a.shape(), &[n, 16]);
        assert_eq!(a, b);
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = Policy::seeded(small_config(1), 4).unwrap();
    // exercise the hard mask and log terms
    let heads: Vec<_> = p.heads().map(|h| h.masking).collect();
    for a in heads {
        p.store.get_mut(a).data_mut().copy_from_slice(&[1.0, 0.5, 0.2, 0.1]);
    }
    for _ in 0..5 {
        let inst = instance(&mut rng, 6, 1, 5);
        let mut perm: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pinst = permuted(&inst, &perm);
        for training in [false, true] {
            let a = encode_eval(&p, &inst, training);
            let b = encode_eval(&p, &pinst, training);
            for i in 0..6 {
                for c in 0..16 {
                    assert!((a.at(i, c) - b.at(perm[i], c)).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn quantum_heads_at_zero_angles_match_classical_twins() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Policy::seeded(small_config(2), 5).unwrap();
    for id in p.circuit_params() {
        p.store.get_mut(id).data_mut().fill(0.0);
    }
    let twin = p.classical_twin();
    for _ in 0..20 {
        let inst = instance(&mut rng, 5, 1, 4);
        assert!(encode_eval(&p, &inst, false).max_abs_diff(&encode_eval(&twin, &inst, false)) < 1e-9);
    }
}

#[test]
fn quantum_head_equals_classical_head_with_rotated_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = Policy::seeded(small_config(1), 6).unwrap();
    let mut twin = p.classical_twin();
    // fold each circuit W into its projection: M ← M Wᵀ, u ← u Wᵀ
    for (h, th) in p.heads().zip(twin.clone().heads()) {
        let proj = [
            (h.theta_query, vec![th.query]),
            (h.theta_key, std::iter::once(th.key).chain(th.key_sources.clone()).collect()),
            (h.theta_value, std::iter::once(th.value).chain(th.value_sources.clone()).collect()),
        ];
        for (theta, targets) in proj {
            let Some(theta) = theta else { continue };
            let thetas = p.store.get(theta).data().to_vec();
            let n = (2..64).find(|n| n * (n - 1) / 2 == thetas.len()).unwrap();
            let w = extract_orthogonal_matrix(&PyramidCircuit::new(n, thetas).unwrap());
            for t in targets {
                let m = twin.store.get(t).clone();
                let rotated: Vec<f64> = (0..m.rows())
                    .flat_map(|r| {
                        let row = m.row(r).to_vec();
                        let w = &w;
                        (0..n).map(move |c| (0..n).map(|k| row[k] * w.at(c, k)).sum::<f64>())
                    })
                    .collect();
                twin.store.get_mut(t).data_mut().copy_from_slice(&rotated);
            }
        }
    }
    for _ in 0..10 {
        let inst = instance(&mut rng, 5, 1, 4);
        assert!(encode_eval(&p, &inst, false).max_abs_diff(&encode_eval(&twin, &inst, false)) < 1e-9);
        let a = p.rollout(Arc::new(inst.clone()), DecodeMode::Greedy, 0).unwrap();
        let b = twin.rollout(Arc::new(inst), DecodeMode::Greedy, 0).unwrap();
        assert_eq!(a.actions, b.actions);
        assert!((a.log_prob - b.log_prob).abs() < 1e-9);
    }
}

#[test]
fn single_feasible_node_gets_all_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inst = instance(&mut rng, 4, 1, 0);
    inst.demand.push(DemandSpec {
        kind: DemandKind::Direct,
        nodes: vec![2, 3],
        volume: 1.0,
    });
    let p = Policy::seeded(small_config(1), 7).unwrap();
    let r = p.rollout(Arc::new(inst), DecodeMode::Sample, 1).unwrap();
    assert_eq!(r.actions, vec![(0, 2), (0, 3)]);
    assert!(r.step_probs.iter().all(|&q| (q - 1.0).abs() < 1e-12));
    assert_eq!(r.log_prob, 0.0);
}

#[test]
fn symmetric_state_gives_uniform_choice() {
    // truck at the centre of an equilateral arrangement with identical demand at each corner
    let n = 4;
    let c = [0.5, 0.5];
    let r = 0.3;
    let pts: Vec<[f64; 2]> = std::iter::once(c)
        .chain((0..3).map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            [c[0] + r * a.cos(), c[1] + r * a.sin()]
        }))
        .collect();
    let inst = Instance {
        nodes: (0..n)
            .map(|id| NodeSpec {
                id,
                name: String::new(),
                x: Some(pts[id][0]),
                y: Some(pts[id][1]),
            })
            .collect(),
        time_matrix: (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else if i == 0 || j == 0 { 100.0 } else { 173.0 }).collect())
            .collect(),
        trucks: vec![TruckSpec { capacity: 10.0, start: 0 }],
        horizon_s: 1e5,
        demand: vec![
            DemandSpec { kind: DemandKind::Direct, nodes: vec![1, 2], volume: 1.0 },
            DemandSpec { kind: DemandKind::Direct, nodes: vec![2, 3], volume: 1.0 },
            DemandSpec { kind: DemandKind::Direct, nodes: vec![3, 1], volume: 1.0 },
        ],
    };
    // with rotation-invariant inputs every weight setting is symmetric only if the
    // coordinates do not enter; zero the coordinate rows of the embedding
    let mut p = Policy::seeded(small_config(1), 8).unwrap();
    let w = p.store.get_mut(p.embed.0);
    w.data_mut()[..32].fill(0.0);
    let inst = Arc::new(inst);
    let state = EnvState::new(inst.clone()).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (enc, _) = p.encode(&mut tape, &[inst.as_ref()], false, &mut rng).unwrap();
    let probs = p.decode_step(&mut tape, enc[0], &state, 0).unwrap().unwrap();
    let v = tape.value(probs).data();
    assert_eq!(v[0], 0.0);
    for k in 1..4 {
        assert!((v[k] - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn probabilities_normalise_and_log_prob_replays() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = Policy::seeded(small_config(1), 9).unwrap();
    for seed in 0..20 {
        let inst = Arc::new(instance(&mut rng, 6, 2, 5));
        let r = p.rollout(inst.clone(), DecodeMode::Sample, seed).unwrap();
        let product: f64 = r.step_probs.iter().product();
        assert!((r.log_prob.exp() - product).abs() < 1e-9);

        let mut state = EnvState::new(inst.clone()).unwrap();
        let mut tape = Tape::new();
        let (enc, _) = p.encode(&mut tape, &[inst.as_ref()], false, &mut rng).unwrap();
        for &(m, z) in &r.actions {
            assert_eq!(state.next_active(), Some(m));
            let probs = p.decode_step(&mut tape, enc[0], &state, m).unwrap().unwrap();
            let v = tape.value(probs).data();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mask = state.feasibility_mask(m);
            assert!(v.iter().zip(&mask).all(|(&q, &f)| f || q == 0.0));
            state.step(m, z).unwrap();
        }
        assert_eq!(state.next_active(), None);

        let replay = p.rollout(inst, DecodeMode::Replay(r.actions.iter().map(|a| a.1).collect()), 0).unwrap();
        assert!((replay.log_prob - r.log_prob).abs() < 1e-12);
    }
}

#[test]
fn greedy_rollouts_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = Policy::seeded(small_config(1), 10).unwrap();
    let inst = Arc::new(instance(&mut rng, 6, 2, 6));
    let a = p.rollout(inst.clone(), DecodeMode::Greedy, 1).unwrap();
    let b = p.rollout(inst, DecodeMode::Greedy, 2).unwrap();
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.log_prob, b.log_prob);
}

#[test]
fn sampled_route_frequencies_match_probabilities() {
    // two nodes; the truck either loads at home first or drives out first
    let inst = Arc::new(Instance {
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
        horizon_s: 1e4,
        demand: vec![
            DemandSpec { kind: DemandKind::Direct, nodes: vec![0, 1], volume: 1.0 },
            DemandSpec { kind: DemandKind::Direct, nodes: vec![1, 0], volume: 2.0 },
        ],
    });
    let p = Policy::seeded(small_config(1), 11).unwrap();
    let first = p.rollout(inst.clone(), DecodeMode::Greedy, 0).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (enc, _) = p.encode(&mut tape, &[inst.as_ref()], false, &mut rng).unwrap();
    let state = EnvState::new(inst.clone()).unwrap();
    let probs = p.decode_step(&mut tape, enc[0], &state, 0).unwrap().unwrap();
    let p0 = tape.value(probs).data()[0];
    assert!(first.actions.len() >= 2);

    let samples = 10_000;
    let mut home_first = 0;
    for seed in 0..samples {
        let r = p.rollout(inst.clone(), DecodeMode::Sample, seed).unwrap();
        if r.actions[0].1 == 0 {
            home_first += 1;
        }
    }
    let freq = home_first as f64 / samples as f64;
    let sigma = (p0 * (1.0 - p0) / samples as f64).sqrt();
    assert!((freq - p0).abs() < 3.0 * sigma + 1e-12, "freq {freq} vs p {p0}");
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inst = Arc::new(instance(&mut rng, 4, 1, 4));
    let mut p = Policy::seeded(small_config(1), 12).unwrap();
    let heads: Vec<_> = p.heads().map(|h| h.masking).collect();
    for a in heads {
        p.store.get_mut(a).data_mut().copy_from_slice(&[0.9, 0.4, 0.3, 0.2]);
    }
    let nodes: Vec<usize> = p.rollout(inst.clone(), DecodeMode::Sample, 3).unwrap().actions.iter().map(|a| a.1).collect();

    let f = |p: &Policy| {
        let mut tape = Tape::new();
        let v = p.replay_log_prob(&mut tape, inst.clone(), &nodes, true).unwrap();
        tape.value(v).data()[0]
    };
    let mut tape = Tape::new();
    let root = p.replay_log_prob(&mut tape, inst.clone(), &nodes, true).unwrap();
    let grads = tape.backward(root);
    let mut store = p.store.clone();
    store.zero_grads();
    tape.accumulate_param_grads(&grads, &mut store).unwrap();

    let h = 1e-5;
    let ids: Vec<_> = p.store.ids().collect();
    for id in ids {
        let analytic = store.get(id).grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let mut fd = vec![0.0; analytic.len()];
        for k in 0..analytic.len() {
            let orig = p.store.get(id).data()[k];
            p.store.get_mut(id).data_mut()[k] = orig + h;
            let up = f(&p);
            p.store.get_mut(id).data_mut()[k] = orig - h;
            let down = f(&p);
            p.store.get_mut(id).data_mut()[k] = orig;
            fd[k] = (up - down) / (2.0 * h);
        }
        let diff = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-6);
        assert!(diff / scale < 1e-3 || diff < 1e-8, "{}: rel err {}", p.store.name(id), diff / scale);
    }
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.json");
    let mut p = Policy::seeded(small_config(1), 13).unwrap();
    p.bn[0].mean[0] = 0.25;
    let meta = CheckpointMeta {
        nodes: 4,
        trucks: 1,
        clip: 4.5,
        epochs: 3,
    };
    save_checkpoint(&p, &meta, &path).unwrap();
    let (q, m) = load_checkpoint(&path).unwrap();
    assert_eq!(q, p);
    assert_eq!(m, meta);

    let blob = dir.path().join("agent.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 0xff;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(qvrp::Error::Incompatible(_))));

    let text = std::fs::read_to_string(&path).unwrap().replace("\"d\": 16", "\"d\": 32");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(qvrp::Error::Incompatible(_))));
}
