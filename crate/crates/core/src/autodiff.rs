//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and returns the gradient of a scalar loss for every
//! leaf that was registered with `requires_grad`. A fresh graph is built for
//! each forward pass.
//!
//! Binary elementwise ops accept an exact shape match or a right operand whose
//! shape is a suffix of the left operand's shape (trailing-axis broadcast; a
//! 0-d scalar is the empty suffix). Nothing else broadcasts.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    /// Row norms are kept for the backward rule.
    L2Normalize(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    Diag(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Debug)]
pub struct Graph {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss, indexed by the leaf they belong to.
#[derive(Debug)]
pub struct Gradients {
    graph: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not require grad or the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros of `shape` when the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to another graph".into()));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Domain(format!("non-finite result from {op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Registers a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} onto {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let rhs = tb.data();
        let n = rhs.len().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rhs[i % n]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product (Hadamard), `b` may broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::ScalarMul(a, s), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Sum of all entries, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        let mut norms = Vec::with_capacity(rows);
        let mut out = t.clone();
        for i in 0..rows {
            let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {norm:e}, cannot normalize"
                )));
            }
            out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        debug_assert_eq!(out.len(), rows * cols);
        let rg = self.rg(a);
        self.push(out, Op::L2Normalize(a, norms), rg)
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, _) = t.dims2()?;
        let mut out = t.clone();
        for i in 0..rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::dim(format!("diag of non-square {r}x{c}")));
        }
        let d = (0..r).map(|i| t.get(i, i)).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(d), Op::Diag(a), rg)
    }

    /// Gradient of the scalar `loss` with respect to every `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients {
                graph: self.id,
                grads,
            });
        }
        grads[loss.index] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2()?;
                    let n = tb.cols();
                    if self.rg(*a) {
                        // dA = G · Bᵀ
                        let bt = tb.transpose()?;
                        let mut da = vec![0.0; m * k];
                        matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                        accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?)?;
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · G
                        let at = ta.transpose()?;
                        let mut db = vec![0.0; k * n];
                        matmul_into(at.data(), g.data(), &mut db, k, m, n);
                        accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?)?;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        let shape = self.value(*b).shape().to_vec();
                        let reduced = reduce_to_suffix(g.data(), &shape, |_| sign);
                        accumulate(&mut grads, *b, Tensor::new(shape, reduced)?)?;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = tb.len().max(1);
                    if self.rg(*a) {
                        let da = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * tb.data()[i % n])
                            .collect();
                        accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?)?;
                    }
                    if self.rg(*b) {
                        let shape = tb.shape().to_vec();
                        let ad = ta.data();
                        let reduced = reduce_to_suffix(g.data(), &shape, |i| ad[i]);
                        accumulate(&mut grads, *b, Tensor::new(shape, reduced)?)?;
                    }
                }
                Op::ScalarMul(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Exp(a) => {
                    let d = zip_map(&g, &node.value, |gv, yv| gv * yv);
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Log(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, xv| gv / xv);
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv))?;
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let gv = g.data()[0] / t.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(t.shape(), gv))?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?)?,
                Op::L2Normalize(a, norms) => {
                    // dx = (dy - y (y·dy)) / ‖x‖
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (i, norm) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let dot: f64 = yr.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                        for (d, yv) in dx.row_mut(i).iter_mut().zip(yr) {
                            *d = (*d - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = dy - softmax(x) · Σ dy
                    let y = &node.value;
                    let mut dx = g.clone();
                    for i in 0..y.rows() {
                        let total: f64 = g.row(i).iter().sum();
                        for (d, yv) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                            *d -= yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::Diag(a) => {
                    let n = g.len();
                    let mut d = Tensor::zeros(&[n, n]);
                    for (i, gv) in g.data().iter().enumerate() {
                        d.set(i, i, *gv);
                    }
                    accumulate(&mut grads, *a, d)?;
                }
            }
        }

        // Only leaves keep their gradients.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("shapes agree by construction")
}

/// Sums `g[i] * weight(i)` over the leading axes so the result has `shape`.
fn reduce_to_suffix(g: &[f64], shape: &[usize], weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let n = shape.iter().product::<usize>().max(1);
    let mut out = vec![0.0; n];
    for (i, gv) in g.iter().enumerate() {
        out[i % n] += gv * weight(i);
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.index] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
