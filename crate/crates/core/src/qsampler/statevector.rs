use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qonn::{loader_angles, PyramidCircuit, RbsGate};

/// Largest register the dense simulator accepts.
pub const MAX_QUBITS: usize = 14;

/// Dense `2ⁿ` state. Qubit `i` is bit `n − 1 − i` of the basis index, so the unary
/// state with qubit 0 set is `|10…0⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n: usize,
    amplitudes: Vec<Complex64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
}

impl StateVector {
    pub fn basis(n: usize, index: usize) -> Result<Self> {
        if n > MAX_QUBITS {
            return Err(Error::Capacity {
                qubits: n,
                limit: MAX_QUBITS,
            });
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(StateVector { n, amplitudes })
    }

    pub fn qubits(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    fn mask(&self, qubit: usize) -> usize {
        1 << (self.n - 1 - qubit)
    }

    /// Basis index of the unary state with only `qubit` set.
    pub fn unary_index(n: usize, qubit: usize) -> usize {
        1 << (n - 1 - qubit)
    }

    pub fn apply_rbs(&mut self, gate: &RbsGate) {
        let (ma, mb) = (self.mask(gate.qubit_a), self.mask(gate.qubit_b));
        let (s, c) = gate.theta.sin_cos();
        for idx in 0..self.amplitudes.len() {
            if idx & ma != 0 && idx & mb == 0 {
                let partner = idx ^ ma ^ mb;
                let (a, b) = (self.amplitudes[idx], self.amplitudes[partner]);
                self.amplitudes[idx] = a * c + b * s;
                self.amplitudes[partner] = b * c - a * s;
            }
        }
    }

    pub fn apply_pauli(&mut self, qubit: usize, p: Pauli) {
        let m = self.mask(qubit);
        let i = Complex64::new(0.0, 1.0);
        match p {
            Pauli::I => {}
            Pauli::X => {
                for idx in 0..self.amplitudes.len() {
                    if idx & m == 0 {
                        self.amplitudes.swap(idx, idx | m);
                    }
                }
            }
            Pauli::Y => {
                for idx in 0..self.amplitudes.len() {
                    if idx & m == 0 {
                        let (a0, a1) = (self.amplitudes[idx], self.amplitudes[idx | m]);
                        self.amplitudes[idx] = -i * a1;
                        self.amplitudes[idx | m] = i * a0;
                    }
                }
            }
            Pauli::Z => {
                for (idx, a) in self.amplitudes.iter_mut().enumerate() {
                    if idx & m != 0 {
                        *a = -*a;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.amplitudes.iter_mut().for_each(|a| *a *= factor);
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Real parts of the amplitudes on the unary basis, in qubit order.
    pub fn unary_amplitudes(&self) -> Vec<f64> {
        (0..self.n)
            .map(|q| self.amplitudes[Self::unary_index(self.n, q)].re)
            .collect()
    }

    pub fn unary_probabilities(&self) -> Vec<f64> {
        (0..self.n)
            .map(|q| self.amplitudes[Self::unary_index(self.n, q)].norm_sqr())
            .collect()
    }
}

/// Depolarizing error after every two-qubit gate plus independent readout flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub depolarizing: f64,
    pub readout_flip: f64,
}

impl NoiseModel {
    pub const IDEAL: NoiseModel = NoiseModel {
        depolarizing: 0.0,
        readout_flip: 0.0,
    };

    pub fn depolarizing(p: f64) -> Self {
        NoiseModel {
            depolarizing: p,
            readout_flip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("depolarizing", self.depolarizing), ("readout_flip", self.readout_flip)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!("{name} probability {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_ideal(&self) -> bool {
        self.depolarizing == 0.0 && self.readout_flip == 0.0
    }
}

/// An RBS-only circuit on `n` qubits starting from `|10…0⟩`, with the classical
/// sign carried by the loader.
#[derive(Clone, Debug, PartialEq)]
pub struct FullCircuit {
    pub n: usize,
    pub gates: Vec<RbsGate>,
    pub sign: f64,
}

impl FullCircuit {
    /// Loader for the unit vector `x` followed by `pyramid`.
    pub fn load_and_apply(x: &[f64], pyramid: &PyramidCircuit) -> Result<Self> {
        if x.len() != pyramid.n() {
            return Err(Error::dim(
                "load_and_apply",
                format!("vector of length {} on {} qubits", x.len(), pyramid.n()),
            ));
        }
        let loader = loader_angles(x)?;
        let mut gates = loader.gates();
        gates.extend(pyramid.gates());
        Ok(FullCircuit {
            n: x.len(),
            gates,
            sign: if loader.negated { -1.0 } else { 1.0 },
        })
    }

    pub fn with_suffix(&self, extra: impl IntoIterator<Item = RbsGate>) -> Self {
        let mut c = self.clone();
        c.gates.extend(extra);
        c
    }
}

/// Result of a full simulation.
#[derive(Clone, Debug, PartialEq)]
pub enum Simulation {
    Exact(StateVector),
    Counts(Vec<u64>),
}

fn run_ideal(circuit: &FullCircuit) -> Result<StateVector> {
    let mut state = StateVector::basis(circuit.n, StateVector::unary_index(circuit.n, 0))?;
    for g in &circuit.gates {
        state.apply_rbs(g);
    }
    if circuit.sign < 0.0 {
        state.scale(-1.0);
    }
    Ok(state)
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

fn sample_index<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().unwrap_or(&1.0);
    let u = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Simulates `circuit` on the full register. `shots == None` returns the exact
/// state (noise is a sampling-only effect); otherwise returns outcome counts.
pub fn simulate_full<R: Rng + ?Sized>(
    circuit: &FullCircuit,
    noise: &NoiseModel,
    shots: Option<usize>,
    rng: &mut R,
) -> Result<Simulation> {
    if circuit.n > MAX_QUBITS {
        return Err(Error::Capacity {
            qubits: circuit.n,
            limit: MAX_QUBITS,
        });
    }
    noise.validate()?;
    let ideal = run_ideal(circuit)?;
    let Some(shots) = shots else {
        return Ok(Simulation::Exact(ideal));
    };
    let ideal_cdf = cumulative(&ideal.probabilities());
    let mut counts = vec![0u64; 1 << circuit.n];
    for _ in 0..shots {
        let mut errors: Vec<(usize, Pauli, Pauli)> = Vec::new();
        if noise.depolarizing > 0.0 {
            for (k, _) in circuit.gates.iter().enumerate() {
                if rng.random::<f64>() < noise.depolarizing {
                    // one of the 15 non-identity two-qubit Paulis
                    let code = rng.random_range(1..16);
                    errors.push((k, Pauli::ALL[code / 4], Pauli::ALL[code % 4]));
                }
            }
        }
        let mut outcome = if errors.is_empty() {
            sample_index(&ideal_cdf, rng)
        } else {
            let mut state = StateVector::basis(circuit.n, StateVector::unary_index(circuit.n, 0))?;
            let mut next = errors.iter().peekable();
            for (k, g) in circuit.gates.iter().enumerate() {
                state.apply_rbs(g);
                while let Some(&&(at, pa, pb)) = next.peek() {
                    if at != k {
                        break;
                    }
                    state.apply_pauli(g.qubit_a, pa);
                    state.apply_pauli(g.qubit_b, pb);
                    next.next();
                }
            }
            sample_index(&cumulative(&state.probabilities()), rng)
        };
        if noise.readout_flip > 0.0 {
            for q in 0..circuit.n {
                if rng.random::<f64>() < noise.readout_flip {
                    outcome ^= 1 << q;
                }
            }
        }
        counts[outcome] += 1;
    }
    Ok(Simulation::Counts(counts))
}
