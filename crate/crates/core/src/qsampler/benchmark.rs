use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::statevector::{NoiseModel, MAX_QUBITS};
use super::tomography::{tomography, Shots};
use crate::error::{Error, Result};
use crate::qonn::{apply_pyramid, load, pyramid_gate_count, PyramidCircuit};
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub qubit_counts: Vec<usize>,
    pub trials: usize,
    pub shots: Shots,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            qubit_counts: (4..=10).collect(),
            trials: 10,
            shots: Shots::Finite(500),
            noise: NoiseModel::IDEAL,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qubit_counts.is_empty() || self.trials == 0 {
            return Err(Error::Argument("benchmark needs qubit counts and at least one trial".into()));
        }
        if let Some(&n) = self.qubit_counts.iter().find(|&&n| n < 2 || n > MAX_QUBITS) {
            return Err(Error::Capacity {
                qubits: n,
                limit: MAX_QUBITS,
            });
        }
        if self.shots == Shots::Finite(0) {
            return Err(Error::Argument("shots must be at least 1".into()));
        }
        self.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub n: usize,
    pub trial: usize,
    pub component: usize,
    pub exact_value: f64,
    pub estimated_value: f64,
    /// `0` stands for exact probabilities.
    pub shots: usize,
    pub noise_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub circuits: usize,
    pub shots_per_circuit: usize,
    pub measurements: usize,
    pub noise_p: f64,
    pub readout_q: f64,
    pub seed: u64,
    pub per_n: Vec<SizeSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub summary: BenchmarkSummary,
}

fn normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(1.0, 1.0).expect("unit variance is valid");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Runs tomography on random circuits and inputs, with angles and input entries
/// drawn from `Normal(1, 1)`. Each `(n, trial)` pair has its own RNG stream, so the
/// report does not depend on how work is spread over threads.
pub fn benchmark_qonn(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = config
        .qubit_counts
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let results: Vec<Result<Vec<BenchmarkRow>>> = jobs
        .par_iter()
        .map(|&(n, trial)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[n as u64, trial as u64]));
            let circuit = PyramidCircuit::new(n, normal_vector(pyramid_gate_count(n), &mut rng))?;
            let mut x = normal_vector(n, &mut rng);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            let exact = apply_pyramid(&load(&x)?, &circuit)?.amplitudes;
            let est = tomography(&x, &circuit, config.shots, &config.noise, &mut rng)?;
            // The global sign is unobservable, so compare against the closer of ±exact.
            let agreement: f64 = exact.iter().zip(&est.estimate).map(|(a, b)| a * b).sum();
            let exact: Vec<f64> = if agreement < 0.0 { exact.iter().map(|v| -v).collect() } else { exact };
            Ok((0..n)
                .map(|component| BenchmarkRow {
                    n,
                    trial,
                    component,
                    exact_value: exact[component],
                    estimated_value: est.estimate[component],
                    shots: config.shots.count().unwrap_or(0),
                    noise_p: config.noise.depolarizing,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }

    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_n.entry(r.n).or_default().push((r.exact_value - r.estimated_value).abs());
    }
    let per_n = config
        .qubit_counts
        .iter()
        .map(|&n| {
            let errs = &by_n[&n];
            SizeSummary {
                n,
                mean_abs_error: errs.iter().sum::<f64>() / errs.len() as f64,
                max_abs_error: errs.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect();
    let circuits = 3 * jobs.len();
    let shots = config.shots.count().unwrap_or(0);
    Ok(BenchmarkReport {
        rows,
        summary: BenchmarkSummary {
            circuits,
            shots_per_circuit: shots,
            measurements: circuits * shots,
            noise_p: config.noise.depolarizing,
            readout_q: config.noise.readout_flip,
            seed: config.seed,
            per_n,
        },
    })
}

impl BenchmarkReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary)?;
        Ok(())
    }
}
