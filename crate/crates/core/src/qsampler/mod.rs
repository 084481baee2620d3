//! Dense statevector simulation, unary tomography and the accuracy benchmark.

mod benchmark;
mod statevector;
mod tomography;

pub use benchmark::{benchmark_qonn, BenchmarkConfig, BenchmarkReport, BenchmarkRow, BenchmarkSummary, SizeSummary};
pub use statevector::{simulate_full, FullCircuit, NoiseModel, Pauli, Simulation, StateVector, MAX_QUBITS};
pub use tomography::{gauge_fix, recover_signs, tomography, tomography_with_fault, Shots, TomographyResult};
