use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn qvrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvrp"))
        .args(args)
        .env("QVRP_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = qvrp(args);
    assert!(
        out.status.success(),
        "qvrp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    qvrp(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, value.to_string()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tiny_train_config() -> Value {
    json!({
        "policy": {"d": 8, "d_ff": 16, "n_heads": 2},
        "train": {
            "epochs": 3,
            "batch_size": 4,
            "batches_per_epoch": 1,
            "eval_size": 4,
            "sampler": {"nodes": 4, "trucks": 2, "tuples": 2}
        }
    })
}

/// Trains a throwaway 4-node, 2-truck agent and returns its checkpoint.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let cfg = write(dir, "train.json", &tiny_train_config());
    let out = dir.join("agent");
    ok(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&out)]);
    out.join("checkpoint.json")
}

fn line_instance(n: usize, groups: Value) -> Value {
    json!({
        "nodes": (0..n).map(|i| json!({"id": i, "name": format!("N{i}")})).collect::<Vec<_>>(),
        "time_matrix": (0..n)
            .map(|i| (0..n).map(|j| (i as f64 - j as f64).abs() * 1800.0).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "box_groups": groups,
    })
}

#[test]
fn gen_instance_default_shape_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-instance", "--seed", "3", "--out", s(dir.path())]);
    let path = dir.path().join("instance.json");
    let v = read_json(&path);
    assert_eq!(v["nodes"].as_array().unwrap().len(), 21);
    assert_eq!(v["box_groups"].as_array().unwrap().len(), 107);
    let full = qvrp::orchestrator::FullInstance::load(&path).unwrap();
    let again = dir.path().join("again.json");
    full.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn plant_preset_uses_the_eight_names() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-instance", "--preset", "plants-8", "--out", s(dir.path())]);
    let v = read_json(&dir.path().join("instance.json"));
    let names: Vec<&str> = v["nodes"].as_array().unwrap().iter().map(|n| n["name"].as_str().unwrap()).collect();
    assert_eq!(names, qvrp::orchestrator::PLANT_NAMES.to_vec());
    assert!(names.contains(&"NISHIO CROSS-DOCKING"));
}

#[test]
fn benchmark_default_protocol() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["benchmark-qonn", "--out", s(dir.path())]);
    let summary = read_json(&dir.path().join("benchmark_summary.json"));
    assert_eq!(summary["circuits"], 210);
    assert_eq!(summary["shots_per_circuit"], 500);
    assert_eq!(summary["measurements"], 105_000);
    let csv = fs::read_to_string(dir.path().join("benchmark.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn train_writes_one_metrics_row_per_epoch_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.json", &tiny_train_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--config", s(&cfg), "--seed", "11", "--workers", "1", "--out", s(out)]);
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,mean_cost,mean_coverage,mean_time_s,baseline_updated")
    );
    assert_eq!(lines.count(), 3);
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train_config();
    cfg["train"]["checkpoint_every"] = json!(2);
    let cfg = write(dir.path(), "train.json", &cfg);
    ok(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(dir.path().join("checkpoint_epoch0002.json").exists());
    assert!(!dir.path().join("checkpoint_epoch0001.json").exists());
    let (_, meta) = qvrp::policy::load_checkpoint(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!((meta.nodes, meta.trucks, meta.epochs), (4, 2, 3));
}

#[test]
fn presets_resolve_and_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", &json!({"train": {"epochs": 0}}));
    assert_eq!(code(&["train", "--preset", "quantum-rank2", "--config", s(&cfg), "--out", s(dir.path())]), 2);
    assert_eq!(code(&["train", "--preset", "no-such-preset", "--out", s(dir.path())]), 2);
}

#[test]
fn schema_violations_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "typo.json", &json!({"train": {"epoch": 3}}));
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(dir.path())]), 2);
    let cfg = write(dir.path(), "heads.json", &json!({"policy": {"d": 10, "n_heads": 4}}));
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(dir.path())]), 2);
    assert_eq!(code(&["benchmark-qonn", "--config", s(&dir.path().join("missing.json"))]), 2);
    assert_eq!(code(&["train", "--workers", "0"]), 2);
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn solve_tiny_instance_in_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let inst = write(
        dir.path(),
        "tiny.json",
        &line_instance(5, json!([{"kind": "direct", "nodes": [0, 1], "boxes": 1, "box_volume": 0.5}])),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&inst), "--seed", "2", "--workers", "1", "--out", s(out)]);
    }
    let report = read_json(&a.join("report.json"));
    let execution = read_json(&a.join("execution.json"));
    let first = &execution["iterations"][0];
    let best = first["best_trial"].as_u64().unwrap() as usize;
    if first["trial_scores"][best].as_f64().unwrap() >= 1.0 {
        assert_eq!(report["iterations"], 1);
    }
    assert_eq!(report["fulfillment_fraction"], 1.0);
    let listing = fs::read_to_string(a.join("routes.csv")).unwrap();
    assert_eq!(listing.lines().next(), Some("Truck,Departure Time,Departure Node"));
    for name in ["report.json", "routes.csv", "satisfaction.csv", "execution.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn incompatible_checkpoints_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    ok(&["gen-instance", "--preset", "plants-8", "--out", s(dir.path())]);
    let inst = dir.path().join("instance.json");
    let out = dir.path().join("solve");

    let cfg = write(dir.path(), "solve.json", &json!({"search": {"n_prime": 5}}));
    assert_eq!(code(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&inst), "--config", s(&cfg), "--out", s(&out)]), 3);

    let small = write(
        dir.path(),
        "small.json",
        &line_instance(3, json!([{"kind": "direct", "nodes": [0, 1], "boxes": 1, "box_volume": 0.5}])),
    );
    assert_eq!(code(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&small), "--out", s(&out)]), 3);

    let blob = dir.path().join("agent/checkpoint.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, bytes).unwrap();
    assert_eq!(code(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&inst), "--out", s(&out)]), 3);
}

#[test]
fn stagnation_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    ok(&["gen-instance", "--preset", "plants-8", "--out", s(dir.path())]);
    let cfg = write(dir.path(), "solve.json", &json!({"search": {"max_iterations": 1, "clip": 0.01}}));
    let out = dir.path().join("solve");
    let inst = dir.path().join("instance.json");
    assert_eq!(code(&["solve", "--checkpoint", s(&ckpt), "--instance", s(&inst), "--config", s(&cfg), "--out", s(&out)]), 4);
}
