//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the backward sweep. Nodes are appended in evaluation order, so
//! walking the list backwards is a reverse topological order.

use std::fmt;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Additive sentinel used for masked attention entries.
pub const MASK_SENTINEL: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward pass is computed outside the tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Ln(Var),
    Exp(Var),
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    Pick(Var, usize),
    LinComb(Var, Vec<Vec<f64>>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-feature statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() || a.rows() != b.rows() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: impl IntoIterator<Item = f64>) {
    let slot = &mut grads[v.0];
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g.into_iter().collect()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a free leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads of the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        let v = self.push(t, Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    /// Adds a length-`c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let out: Vec<f64> = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let shape = vec![tx.rows(), c];
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if c.len() != t.len() {
            return Err(Error::dim("mul_const", format!("{} vs {}", t.len(), c.len())));
        }
        let out = t.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MulConst(x, c), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Inverted dropout; the identity when `p == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Var {
        if !training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let out = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(value, Op::Dropout(x, mask), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let c = self.value(*first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            r += self.value(p).rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {c}")));
        }
        let out: Vec<f64> = (0..r)
            .flat_map(|i| t.row(i)[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols(x, start), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {r}")));
        }
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows(x, start), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    /// Row-wise softmax of `u + mask`. Mask entries at or below half the
    /// sentinel count as masked; a row with every entry masked is an error.
    pub fn softmax_rows(&mut self, u: Var, mask_additive: &Tensor) -> Result<Var> {
        let t = self.value(u);
        check_same("softmax_rows", t, mask_additive)?;
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let m = mask_additive.row(i);
            if m.iter().all(|&v| v <= MASK_SENTINEL / 2.0) {
                return Err(Error::InfeasibleRow { row: i });
            }
            let row = t.row(i);
            let shifted: Vec<f64> = row.iter().zip(m).map(|(a, b)| a + b).collect();
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (dst, &s) in o.iter_mut().zip(&shifted) {
                *dst = (s - max).exp();
                total += *dst;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.ng(u);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(u), ng))
    }

    /// Training-mode batch norm over rows, returning the observed statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batch_norm", "affine parameters do not match features"));
        }
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, v) in mean.iter_mut().zip(t.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / r as f64).collect();
        let unbiased: Vec<f64> = if r > 1 {
            var.iter().map(|s| s / (r - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let h = (t.at(i, j) - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(vec![r, c], out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if mean.len() != c || var.len() != c || self.value(gamma).len() != c {
            return Err(Error::dim("batch_norm", "running statistics do not match features"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = g[j] * (t.at(i, j) - mean[j]) * inv_std[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::filled(&[1, 1], s), Op::Sum(x), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            out.iter_mut().zip(t.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(x);
        self.push(Tensor::new(vec![1, c], out).expect("c > 0"), Op::MeanRows(x), ng)
    }

    /// Selects one element by flat index.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t
            .data()
            .get(index)
            .ok_or_else(|| Error::dim("pick", format!("index {index} of {}", t.len())))?;
        let ng = self.ng(x);
        Ok(self.push(Tensor::filled(&[1, 1], v), Op::Pick(x, index), ng))
    }

    /// `Σ_k coeffs[k] · basis[k]`, with constant basis tensors shaped like `like`.
    pub fn lin_comb(&mut self, coeffs: Var, basis: Vec<Vec<f64>>, shape: &[usize]) -> Result<Var> {
        let c = self.value(coeffs).data();
        let len: usize = shape.iter().product();
        if c.len() != basis.len() || basis.iter().any(|b| b.len() != len) {
            return Err(Error::dim("lin_comb", "coefficients and basis disagree"));
        }
        let mut out = vec![0.0; len];
        for (k, b) in basis.iter().enumerate() {
            if c[k] != 0.0 {
                out.iter_mut().zip(b).for_each(|(o, v)| *o += c[k] * v);
            }
        }
        let ng = self.ng(coeffs);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::LinComb(coeffs, basis), ng))
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Reverse sweep seeded with ones on `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let bt = tb.transpose();
                    acc(grads, *a, matmul_raw(g, bt.data(), m, n, k));
                }
                if self.ng(*b) {
                    let at = ta.transpose();
                    acc(grads, *b, matmul_raw(at.data(), g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.iter().copied());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.iter().copied());
                }
                if self.ng(*b) {
                    acc(grads, *b, g.iter().map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    acc(grads, *a, g.iter().zip(tb).map(|(x, y)| x * y));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.iter().zip(ta).map(|(x, y)| x * y));
                }
            }
            Op::AddRow(x, bias) => {
                if self.ng(*x) {
                    acc(grads, *x, g.iter().copied());
                }
                if self.ng(*bias) {
                    let c = out.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(grads, *bias, gb);
                }
            }
            Op::Scale(x, f) => acc(grads, *x, g.iter().map(|v| v * f)),
            Op::MulConst(x, c) => acc(grads, *x, g.iter().zip(c).map(|(a, b)| a * b)),
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                acc(
                    grads,
                    *x,
                    g.iter().zip(tx).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }),
                );
            }
            Op::Tanh(x) => acc(
                grads,
                *x,
                g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)),
            ),
            Op::Ln(x) => acc(
                grads,
                *x,
                g.iter().zip(self.value(*x).data()).map(|(gv, xv)| gv / xv),
            ),
            Op::Exp(x) => acc(grads, *x, g.iter().zip(out.data()).map(|(gv, y)| gv * y)),
            Op::Dropout(x, mask) => acc(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m)),
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let gp: Vec<f64> = (0..r)
                            .flat_map(|i| g[i * total + offset..i * total + offset + c].iter().copied())
                            .collect();
                        acc(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        acc(grads, p, g[offset..offset + len].iter().copied());
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let len = out.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(grads, *x, gx);
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                let gt = Tensor::new(vec![r, c], g.to_vec()).expect("shape").transpose();
                acc(grads, *x, gt.into_data());
            }
            Op::SoftmaxRows(u) => {
                let c = out.cols();
                let mut gu = vec![0.0; out.len()];
                for (i, (prow, grow)) in out.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = prow.iter().zip(grow).map(|(p, gv)| p * gv).sum();
                    for j in 0..c {
                        gu[i * c + j] = prow[j] * (grow[j] - dot);
                    }
                }
                acc(grads, *u, gu);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        sum_g[j] += g[i * c + j];
                        sum_gx[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
                if self.ng(*x) {
                    let n = r as f64;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            gx[k] = gam[j] * inv_std[j] / n
                                * (n * g[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                        }
                    }
                    acc(grads, *x, gx);
                }
                if self.ng(*gamma) {
                    acc(grads, *gamma, sum_gx);
                }
                if self.ng(*beta) {
                    acc(grads, *beta, sum_g);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (r, c) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data();
                let tx = self.value(*x);
                if self.ng(*x) {
                    let gx: Vec<f64> = (0..r * c)
                        .map(|k| g[k] * gam[k % c] * inv_std[k % c])
                        .collect();
                    acc(grads, *x, gx);
                }
                if self.ng(*gamma) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * (tx.at(i, j) - mean[j]) * inv_std[j];
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if self.ng(*beta) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(grads, *beta, gb);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let r = tx.rows() as f64;
                let c = tx.cols();
                acc(grads, *x, (0..tx.len()).map(|k| g[k % c] / r));
            }
            Op::Pick(x, index) => {
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[*index] = g[0];
                acc(grads, *x, gx);
            }
            Op::LinComb(coeffs, basis) => {
                let gc: Vec<f64> = basis
                    .iter()
                    .map(|b| b.iter().zip(g).map(|(x, y)| x * y).sum())
                    .collect();
                acc(grads, *coeffs, gc);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&ins, out, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if self.ng(v) {
                        acc(grads, v, gv);
                    }
                }
            }
        }
    }

    /// Adds the gradients of every loaded parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Parameter gradients as `(id, gradient)` pairs in load order.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> impl Iterator<Item = (ParamId, &'a [f64])> + 'a {
        self.params
            .iter()
            .filter_map(move |&(id, v)| grads.get(v).map(|g| (id, g)))
    }
}
