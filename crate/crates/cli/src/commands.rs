use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use qvrp::orchestrator::{execution_loop, generate_synthetic_instance, simulate_full_scale, FullInstance, SuggestedRoute};
use qvrp::policy::{load_checkpoint, save_checkpoint, CheckpointMeta, Policy};
use qvrp::qsampler::benchmark_qonn;
use qvrp::seeds::derive_seed;
use qvrp::trainer::{write_metrics_csv, Trainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{read_document, resolve, BenchmarkRun, GenRun, SolveRun, TrainRun};
use crate::{CliError, Common};

fn invalid(e: qvrp::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn unknown_preset(name: &str, known: &[&str]) -> CliError {
    CliError::Config(format!("unknown preset {name:?}; expected one of {}", known.join(", ")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_out(common: &Common) -> Result<(), CliError> {
    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))
}

pub fn train(common: &Common) -> Result<(), CliError> {
    const PRESETS: [&str; 4] = ["classical-3truck", "quantum-rank2", "quantum-rank23", "quantum-cyclic"];
    let doc = read_document(common.config.as_deref())?;
    let preset = match &common.preset {
        Some(name) => Some(TrainRun::preset(name).ok_or_else(|| unknown_preset(name, &PRESETS))?),
        None => None,
    };
    let mut run: TrainRun = resolve(preset, doc)?;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.validate().map_err(invalid)?;
    prepare_out(common)?;
    write_json(&common.out.join("config.json"), &run)?;

    let policy = Policy::seeded(run.policy.clone(), derive_seed(run.train.seed, &[3]))?;
    let every = run.train.checkpoint_every;
    let meta = |t: &Trainer, epochs: usize| CheckpointMeta {
        nodes: run.train.sampler.nodes,
        trucks: run.train.sampler.trucks,
        clip: t.clip_value(),
        epochs,
    };
    let out = &common.out;
    let trainer = qvrp::trainer::train(run.train.clone(), policy, |m, t| {
        log::info!(
            "epoch {}: cost {:.5}, coverage {:.4}, time {:.0} s{}",
            m.epoch,
            m.mean_cost,
            m.mean_coverage,
            m.mean_time_s,
            if m.baseline_updated { ", baseline updated" } else { "" }
        );
        if every > 0 && m.epoch % every == 0 {
            save_checkpoint(&t.policy, &meta(t, m.epoch), &out.join(format!("checkpoint_epoch{:04}.json", m.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.policy, &meta(&trainer, trainer.metrics.len()), &out.join("checkpoint.json"))?;
    write_metrics_csv(&trainer.metrics, create(&out.join("metrics.csv"))?)?;
    Ok(())
}

pub fn solve(common: &Common, checkpoint: &Path, instance: &Path) -> Result<(), CliError> {
    if common.preset.is_some() {
        return Err(CliError::Config("solve has no presets".into()));
    }
    let doc = read_document(common.config.as_deref())?;
    let given = |key: &str| doc.pointer(&format!("/search/{key}")).is_some();
    let (explicit_nodes, explicit_trucks) = (given("n_prime"), given("trucks"));
    let mut run: SolveRun = resolve(None, doc)?;
    if !checkpoint.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let full = FullInstance::load(instance).map_err(|e| CliError::Config(format!("instance {}: {e}", instance.display())))?;
    let (agent, meta) = load_checkpoint(checkpoint)?;

    let search = &mut run.search;
    if !explicit_nodes {
        search.n_prime = meta.nodes;
    }
    if !explicit_trucks {
        search.trucks = meta.trucks;
    }
    if let Some(seed) = common.seed {
        search.seed = seed;
    }
    search.validate().map_err(invalid)?;
    if search.n_prime != meta.nodes || search.trucks != meta.trucks {
        return Err(CliError::Incompatible(format!(
            "checkpoint was trained on {} nodes and {} trucks, configuration asks for {} and {}",
            meta.nodes, meta.trucks, search.n_prime, search.trucks
        )));
    }
    if search.n_prime >= full.n() {
        return Err(CliError::Incompatible(format!(
            "agent handles {} nodes, which does not decompose a {}-node instance",
            search.n_prime,
            full.n()
        )));
    }
    let clip = search.clip.unwrap_or(meta.clip);
    prepare_out(common)?;
    write_json(&common.out.join("config.json"), &run)?;

    let search = &run.search;
    let result = execution_loop(&full, &agent, search, clip)?;
    let routes: Vec<SuggestedRoute> = result.routes().cloned().collect();
    let report = simulate_full_scale(&full, &routes, search.truck_capacity, &search.shifts)?;
    log::info!(
        "{} iterations, {} trucks, {:.2}% of demand fulfilled",
        report.iterations,
        report.trucks_used,
        100.0 * report.fulfillment_fraction
    );
    let out = &common.out;
    write_json(&out.join("execution.json"), &result)?;
    report.write_json(create(&out.join("report.json"))?)?;
    report.write_listing(&full, create(&out.join("routes.csv"))?)?;
    report.write_satisfaction(create(&out.join("satisfaction.csv"))?)?;
    Ok(())
}

pub fn benchmark(common: &Common) -> Result<(), CliError> {
    if common.preset.is_some() {
        return Err(CliError::Config("benchmark-qonn has no presets".into()));
    }
    let mut run: BenchmarkRun = resolve(None, read_document(common.config.as_deref())?)?;
    if let Some(seed) = common.seed {
        run.benchmark.seed = seed;
    }
    run.benchmark.validate().map_err(invalid)?;
    prepare_out(common)?;
    let report = benchmark_qonn(&run.benchmark)?;
    log::info!(
        "{} circuits, {} measurements",
        report.summary.circuits,
        report.summary.measurements
    );
    report.write_csv(create(&common.out.join("benchmark.csv"))?)?;
    report.write_summary(create(&common.out.join("benchmark_summary.json"))?)?;
    Ok(())
}

pub fn gen_instance(common: &Common) -> Result<(), CliError> {
    let preset = match &common.preset {
        Some(name) => Some(GenRun::preset(name).ok_or_else(|| unknown_preset(name, &["default", "plants-8"]))?),
        None => None,
    };
    let mut run: GenRun = resolve(preset, read_document(common.config.as_deref())?)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    run.spec.validate().map_err(invalid)?;
    prepare_out(common)?;
    let full = generate_synthetic_instance(&run.spec, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    full.save(&common.out.join("instance.json"))?;
    Ok(())
}
