//! Unary-subspace emulation of orthogonal layers built from RBS gates.
//!
//! A unary state on `n` qubits is a real `n`-vector: component `i` is the
//! amplitude of the basis state with only qubit `i` set. An RBS gate on qubits
//! `(a, b)` rotates components `a` and `b` and leaves the rest alone, so a
//! whole circuit is an orthogonal matrix applied in `O(gates)` time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Two-qubit reconfigurable beam splitter. On unary components `(a, b)` it acts as
/// `[[cos θ, sin θ], [−sin θ, cos θ]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbsGate {
    pub qubit_a: usize,
    pub qubit_b: usize,
    pub theta: f64,
}

impl RbsGate {
    pub fn new(qubit_a: usize, qubit_b: usize, theta: f64) -> Result<Self> {
        if qubit_a == qubit_b {
            return Err(Error::Argument(format!("RBS gate on a single qubit {qubit_a}")));
        }
        Ok(RbsGate {
            qubit_a,
            qubit_b,
            theta,
        })
    }

    #[inline]
    pub fn apply_unary(&self, amps: &mut [f64]) {
        let (s, c) = self.theta.sin_cos();
        let (a, b) = (amps[self.qubit_a], amps[self.qubit_b]);
        amps[self.qubit_a] = c * a + s * b;
        amps[self.qubit_b] = -s * a + c * b;
    }
}

/// Qubit pairs `(i, i+1)` of the pyramid in application order.
///
/// Layer `t` (of `2n − 3`) holds the pairs starting at `i ≡ t (mod 2)` with
/// `i ≤ t` and `i ≤ 2n − 4 − t`.
pub fn pyramid_layout(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    if n < 2 {
        return pairs;
    }
    for t in 0..(2 * n - 3) {
        let hi = t.min(2 * n - 4 - t);
        let mut i = t % 2;
        while i <= hi {
            pairs.push((i, i + 1));
            i += 2;
        }
    }
    pairs
}

pub fn pyramid_gate_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Pyramid of `n(n−1)/2` RBS gates on `n` qubits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CircuitDoc", into = "CircuitDoc")]
pub struct PyramidCircuit {
    n: usize,
    thetas: Vec<f64>,
    layout: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct CircuitDoc {
    n: usize,
    thetas: Vec<f64>,
}

impl TryFrom<CircuitDoc> for PyramidCircuit {
    type Error = Error;

    fn try_from(doc: CircuitDoc) -> Result<Self> {
        PyramidCircuit::new(doc.n, doc.thetas)
    }
}

impl From<PyramidCircuit> for CircuitDoc {
    fn from(c: PyramidCircuit) -> Self {
        CircuitDoc {
            n: c.n,
            thetas: c.thetas,
        }
    }
}

impl PyramidCircuit {
    pub fn new(n: usize, thetas: Vec<f64>) -> Result<Self> {
        if n < 1 {
            return Err(Error::Argument("circuit needs at least one qubit".into()));
        }
        let expected = pyramid_gate_count(n);
        if thetas.len() != expected {
            return Err(Error::dim(
                "pyramid",
                format!("{n} qubits need {expected} angles, got {}", thetas.len()),
            ));
        }
        Ok(PyramidCircuit {
            n,
            thetas,
            layout: pyramid_layout(n),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, vec![0.0; pyramid_gate_count(n)]).expect("valid size")
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        use std::f64::consts::PI;
        let thetas = (0..pyramid_gate_count(n))
            .map(|_| rng.random_range(-PI..PI))
            .collect();
        Self::new(n, thetas).expect("valid size")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn gates(&self) -> impl Iterator<Item = RbsGate> + '_ {
        self.layout
            .iter()
            .zip(&self.thetas)
            .map(|(&(a, b), &theta)| RbsGate {
                qubit_a: a,
                qubit_b: b,
                theta,
            })
    }

    pub fn gate_count(&self) -> usize {
        self.layout.len()
    }

    fn apply_in_place(&self, amps: &mut [f64]) {
        for g in self.gates() {
            g.apply_unary(amps);
        }
    }
}

/// Real amplitudes over the unary basis.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryState {
    pub amplitudes: Vec<f64>,
}

impl UnaryState {
    pub fn basis(n: usize, i: usize) -> Self {
        let mut amplitudes = vec![0.0; n];
        amplitudes[i] = 1.0;
        UnaryState { amplitudes }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.amplitudes)
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Loader parameters for one unit vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LoaderAngles {
    /// `n − 1` angles; gate `i` couples components `i` and `i + 1`.
    pub angles: Vec<f64>,
    /// The vector was loaded as its negation (the loader keeps `x₁ ≥ 0`).
    pub negated: bool,
}

impl LoaderAngles {
    /// The diagonal stack of loader gates. Gate `i` is oriented `(i+1, i)` so that
    /// starting from `e₁` it moves `sin α_i` of the remaining amplitude forward.
    pub fn gates(&self) -> Vec<RbsGate> {
        self.angles
            .iter()
            .enumerate()
            .map(|(i, &theta)| RbsGate {
                qubit_a: i + 1,
                qubit_b: i,
                theta,
            })
            .collect()
    }

    /// Replays the loader from `e₁`, including the classical sign.
    pub fn replay(&self) -> UnaryState {
        let n = self.angles.len() + 1;
        let mut state = UnaryState::basis(n, 0);
        for g in self.gates() {
            g.apply_unary(&mut state.amplitudes);
        }
        if self.negated {
            state.amplitudes.iter_mut().for_each(|a| *a = -*a);
        }
        state
    }
}

/// Angles of the `n − 1` loader gates that prepare the unit vector `x` from `e₁`.
pub fn loader_angles(x: &[f64]) -> Result<LoaderAngles> {
    if x.is_empty() {
        return Err(Error::DegenerateInput("empty vector".into()));
    }
    let nrm = norm(x);
    if nrm == 0.0 {
        return Err(Error::DegenerateInput("zero vector".into()));
    }
    if (nrm - 1.0).abs() > 1e-9 {
        return Err(Error::Normalization { norm: nrm });
    }
    let negated = x[0] < 0.0;
    let v: Vec<f64> = if negated {
        x.iter().map(|a| -a).collect()
    } else {
        x.to_vec()
    };
    let n = v.len();
    // suffix norms: tail[k] = ‖v[k..]‖
    let mut tail = vec![0.0f64; n + 1];
    for k in (0..n).rev() {
        tail[k] = (tail[k + 1].powi(2) + v[k] * v[k]).sqrt();
    }
    let mut angles = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n.saturating_sub(1) {
        let alpha = if k + 2 == n {
            v[n - 1].atan2(v[n - 2])
        } else {
            tail[k + 1].atan2(v[k])
        };
        angles.push(alpha);
    }
    Ok(LoaderAngles { angles, negated })
}

/// Loads a unit vector into a unary state through the loader circuit.
pub fn load(x: &[f64]) -> Result<UnaryState> {
    Ok(loader_angles(x)?.replay())
}

pub fn apply_pyramid(state: &UnaryState, circuit: &PyramidCircuit) -> Result<UnaryState> {
    if state.len() != circuit.n() {
        return Err(Error::dim(
            "apply_pyramid",
            format!("state of length {} on {} qubits", state.len(), circuit.n()),
        ));
    }
    let mut amplitudes = state.amplitudes.clone();
    circuit.apply_in_place(&mut amplitudes);
    Ok(UnaryState { amplitudes })
}

/// The orthogonal matrix `W` of a circuit, built column by column from basis states.
pub fn extract_orthogonal_matrix(circuit: &PyramidCircuit) -> Tensor {
    let n = circuit.n();
    let mut w = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut col = vec![0.0; n];
        col[j] = 1.0;
        circuit.apply_in_place(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            w.data_mut()[i * n + j] = v;
        }
    }
    w
}

/// `‖v‖ · W (v / ‖v‖)`: load the direction, run the pyramid, restore the norm.
pub fn qonn_layer(v: &[f64], circuit: &PyramidCircuit) -> Result<Vec<f64>> {
    if v.len() != circuit.n() {
        return Err(Error::dim(
            "qonn_layer",
            format!("vector of length {} on {} qubits", v.len(), circuit.n()),
        ));
    }
    let nrm = norm(v);
    if nrm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let unit: Vec<f64> = v.iter().map(|x| x / nrm).collect();
    let loaded = load(&unit)?;
    let out = apply_pyramid(&loaded, circuit)?;
    Ok(out.amplitudes.into_iter().map(|a| a * nrm).collect())
}

struct PyramidRowsOp {
    layout: Vec<(usize, usize)>,
}

impl CustomOp for PyramidRowsOp {
    fn name(&self) -> &'static str {
        "pyramid_rows"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let thetas = inputs[1].data();
        let n = output.cols();
        let mut gx = vec![0.0; output.len()];
        let mut gt = vec![0.0; thetas.len()];
        let trig: Vec<(f64, f64)> = thetas.iter().map(|t| t.sin_cos()).collect();
        for r in 0..output.rows() {
            let mut state = output.row(r).to_vec();
            let mut g = grad_out[r * n..(r + 1) * n].to_vec();
            for (k, &(a, b)) in self.layout.iter().enumerate().rev() {
                let (s, c) = trig[k];
                let (ya, yb) = (state[a], state[b]);
                let (ga, gb) = (g[a], g[b]);
                gt[k] += ga * yb - gb * ya;
                g[a] = c * ga - s * gb;
                g[b] = s * ga + c * gb;
                state[a] = c * ya - s * yb;
                state[b] = s * ya + c * yb;
            }
            gx[r * n..(r + 1) * n].copy_from_slice(&g);
        }
        vec![gx, gt]
    }
}

/// Applies the circuit whose angles are the tape value `thetas` to every row of `x`.
///
/// Rows of any norm are accepted; by linearity this equals [`qonn_layer`] row-wise.
pub fn qonn_rows(tape: &mut Tape, x: Var, thetas: Var) -> Result<Var> {
    let n = tape.value(x).cols();
    let layout = pyramid_layout(n);
    let th = tape.value(thetas).data();
    if th.len() != layout.len() {
        return Err(Error::dim(
            "qonn_rows",
            format!("{n} columns need {} angles, got {}", layout.len(), th.len()),
        ));
    }
    let trig: Vec<(f64, f64)> = th.iter().map(|t| t.sin_cos()).collect();
    let xv = tape.value(x);
    let mut out = xv.data().to_vec();
    for row in out.chunks_mut(n) {
        for (&(a, b), &(s, c)) in layout.iter().zip(&trig) {
            let (ya, yb) = (row[a], row[b]);
            row[a] = c * ya + s * yb;
            row[b] = -s * ya + c * yb;
        }
    }
    let value = Tensor::new(vec![xv.rows(), n], out)?;
    Ok(tape.custom(&[x, thetas], value, Box::new(PyramidRowsOp { layout })))
}
