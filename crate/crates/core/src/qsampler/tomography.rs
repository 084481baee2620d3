use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::statevector::{simulate_full, FullCircuit, NoiseModel, Simulation, StateVector};
use crate::error::{Error, Result};
use crate::qonn::{PyramidCircuit, RbsGate};

/// Measurement budget per tomography circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    /// Exact outcome probabilities (the infinite-shot limit).
    Exact,
    Finite(usize),
}

impl Shots {
    pub fn count(&self) -> Option<usize> {
        match self {
            Shots::Exact => None,
            Shots::Finite(s) => Some(*s),
        }
    }

    /// Magnitudes below this are too small for a trustworthy sign comparison.
    pub fn reliability_threshold(&self) -> f64 {
        match self {
            Shots::Exact => 1e-12,
            Shots::Finite(s) => 2.0 / (*s as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TomographyResult {
    pub estimate: Vec<f64>,
    pub shots_per_circuit: Shots,
    pub circuits_used: usize,
    /// Components whose sign was inherited rather than measured.
    pub unreliable: Vec<bool>,
}

/// `π/4` gates on pairs `(start, start+1), (start+2, start+3), …`.
fn comparison_layer(n: usize, start: usize) -> Vec<RbsGate> {
    (start..n.saturating_sub(1))
        .step_by(2)
        .map(|a| RbsGate {
            qubit_a: a,
            qubit_b: a + 1,
            theta: FRAC_PI_4,
        })
        .collect()
}

fn unary_probabilities<R: Rng + ?Sized>(
    circuit: &FullCircuit,
    shots: Shots,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = circuit.n;
    Ok(match simulate_full(circuit, noise, shots.count(), rng)? {
        Simulation::Exact(state) => state.unary_probabilities(),
        Simulation::Counts(counts) => {
            let total = shots.count().unwrap_or(1) as f64;
            (0..n)
                .map(|q| counts[StateVector::unary_index(n, q)] as f64 / total)
                .collect()
        }
    })
}

/// Resolves signs from pairwise comparisons.
///
/// `same_sign[k]` says whether components `k` and `k + 1` agree. A component below
/// `threshold` makes both comparisons touching it unreliable; such components
/// take the most recent reliable sign. The first reliable component is positive.
pub fn recover_signs(magnitudes: &[f64], same_sign: &[bool], threshold: f64) -> (Vec<f64>, Vec<bool>) {
    let n = magnitudes.len();
    let reliable: Vec<bool> = magnitudes.iter().map(|&m| m >= threshold).collect();
    let mut signs = vec![1.0; n];
    let mut last = 1.0;
    let mut seen = false;
    for k in 0..n {
        if !reliable[k] {
            signs[k] = last;
            continue;
        }
        if seen && k > 0 && reliable[k - 1] {
            signs[k] = if same_sign[k - 1] { signs[k - 1] } else { -signs[k - 1] };
        } else {
            signs[k] = last;
        }
        last = signs[k];
        seen = true;
    }
    let unreliable = (0..n)
        .map(|k| !reliable[k] || (k > 0 && !reliable[k - 1] && seen_before(&reliable, k)))
        .collect();
    (signs, unreliable)
}

fn seen_before(reliable: &[bool], k: usize) -> bool {
    reliable[..k].iter().any(|&r| r)
}

/// Three-circuit unary tomography of `W x`.
///
/// Circuit 1 gives magnitudes; circuits 2 and 3 append `π/4` RBS layers on pairs
/// `(1,2),(3,4),…` and `(2,3),(4,5),…`. After such a gate the pair's probabilities
/// are `(x_a + x_b)²/2` and `(x_a − x_b)²/2`, so the first is larger exactly when
/// the signs agree.
pub fn tomography<R: Rng + ?Sized>(
    x: &[f64],
    circuit: &PyramidCircuit,
    shots: Shots,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<TomographyResult> {
    tomography_with_fault(x, circuit, shots, noise, None, rng)
}

/// Like [`tomography`], but inverts the sign comparison between components
/// `k` and `k + 1` when `flip_comparison == Some(k)`.
pub fn tomography_with_fault<R: Rng + ?Sized>(
    x: &[f64],
    circuit: &PyramidCircuit,
    shots: Shots,
    noise: &NoiseModel,
    flip_comparison: Option<usize>,
    rng: &mut R,
) -> Result<TomographyResult> {
    if shots == Shots::Finite(0) {
        return Err(Error::Argument("tomography needs at least one shot".into()));
    }
    let n = circuit.n();
    let base = FullCircuit::load_and_apply(x, circuit)?;
    let even = base.with_suffix(comparison_layer(n, 0));
    let odd = base.with_suffix(comparison_layer(n, 1));

    let p = unary_probabilities(&base, shots, noise, rng)?;
    let p_even = unary_probabilities(&even, shots, noise, rng)?;
    let p_odd = unary_probabilities(&odd, shots, noise, rng)?;

    let magnitudes: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let same_sign: Vec<bool> = (0..n.saturating_sub(1))
        .map(|k| {
            let probs = if k % 2 == 0 { &p_even } else { &p_odd };
            let same = probs[k] > probs[k + 1];
            if flip_comparison == Some(k) {
                !same
            } else {
                same
            }
        })
        .collect();
    let (signs, unreliable) = recover_signs(&magnitudes, &same_sign, shots.reliability_threshold());
    Ok(TomographyResult {
        estimate: magnitudes.iter().zip(&signs).map(|(m, s)| m * s).collect(),
        shots_per_circuit: shots,
        circuits_used: 3,
        unreliable,
    })
}

/// Fixes the global sign so the first component above `threshold` is positive.
pub fn gauge_fix(v: &[f64], threshold: f64) -> Vec<f64> {
    let s = v
        .iter()
        .find(|x| x.abs() >= threshold)
        .map(|x| x.signum())
        .unwrap_or(1.0);
    v.iter().map(|x| x * s).collect()
}
