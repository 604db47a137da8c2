//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use advlora::autodiff::{Graph, Var};
use advlora::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

#[derive(Debug, Clone)]
enum Step {
    Tanh,
    Relu,
    Exp,
    /// `log(x² + 1)`
    LogSquarePlusOne,
    Transpose,
    ScalarMul(f64),
    /// right operand is a fresh leaf `(cols, new_cols)`
    MatMul(usize),
    /// same-shape fresh leaf
    Add,
    Sub,
    Mul,
    /// fresh leaf of shape `[cols]`
    AddRowBias,
    /// fresh 0-d leaf
    MulScalarLeaf,
    L2Normalize,
    LogSoftmaxRows,
    /// square only; ends the chain
    Diag,
    /// ends the chain
    Mean,
}

/// A random differentiable program over small matrices.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    input_shape: [usize; 2],
    steps: Vec<Step>,
    /// initial values of every leaf, in creation order
    pub leaves: Vec<Tensor>,
    /// fixed weights of the final weighted sum
    readout: Tensor,
}

impl RandomGraph {
    pub fn sample(r: &mut ChaCha8Rng) -> Self {
        let mut shape = [r.random_range(1..=4), r.random_range(1..=4)];
        let input_shape = shape;
        let mut leaves = vec![uniform_tensor(r, &shape, -1.0, 1.0)];
        let mut steps = Vec::new();
        let mut vector = false;
        let len = r.random_range(1..=7);
        for _ in 0..len {
            let step = match r.random_range(0..15) {
                0 => Step::Tanh,
                1 => Step::Relu,
                2 => Step::Exp,
                3 => Step::LogSquarePlusOne,
                4 => Step::Transpose,
                5 => Step::ScalarMul(r.random_range(-2.0..2.0)),
                6 => Step::MatMul(r.random_range(1..=4)),
                7 => Step::Add,
                8 => Step::Sub,
                9 => Step::Mul,
                10 => Step::AddRowBias,
                11 => Step::MulScalarLeaf,
                12 => Step::L2Normalize,
                13 => Step::LogSoftmaxRows,
                _ => {
                    if shape[0] == shape[1] && r.random_bool(0.5) {
                        Step::Diag
                    } else {
                        Step::Mean
                    }
                }
            };
            match &step {
                Step::Transpose => shape = [shape[1], shape[0]],
                Step::MatMul(n) => {
                    leaves.push(uniform_tensor(r, &[shape[1], *n], -1.0, 1.0));
                    shape = [shape[0], *n];
                }
                Step::Add | Step::Sub | Step::Mul => leaves.push(uniform_tensor(r, &shape, -1.0, 1.0)),
                Step::AddRowBias => leaves.push(uniform_tensor(r, &[shape[1]], -1.0, 1.0)),
                Step::MulScalarLeaf => leaves.push(uniform_tensor(r, &[], -1.5, 1.5)),
                Step::Diag => vector = true,
                _ => {}
            }
            let terminal = matches!(step, Step::Diag | Step::Mean);
            steps.push(step);
            if terminal {
                break;
            }
        }
        let readout = if matches!(steps.last(), Some(Step::Mean)) {
            uniform_tensor(r, &[], -1.0, 1.0)
        } else if vector {
            uniform_tensor(r, &[shape[0]], -1.0, 1.0)
        } else {
            uniform_tensor(r, &shape, -1.0, 1.0)
        };
        Self {
            input_shape,
            steps,
            leaves,
            readout,
        }
    }

    /// Builds the program on a fresh graph from `leaves`.
    pub fn build(&self, leaves: &[Tensor]) -> advlora::Result<(Graph, Var, Vec<Var>, Vec<Var>)> {
        assert_eq!(leaves[0].shape(), &self.input_shape);
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let mut relu_inputs = Vec::new();
        let mut next = 1;
        let mut x = vars[0];
        for step in &self.steps {
            x = match step {
                Step::Tanh => g.tanh(x)?,
                Step::Relu => {
                    relu_inputs.push(x);
                    g.relu(x)?
                }
                Step::Exp => g.exp(x)?,
                Step::LogSquarePlusOne => {
                    let sq = g.mul(x, x)?;
                    let one = g.constant(Tensor::scalar(1.0));
                    let shifted = g.add(sq, one)?;
                    g.log(shifted)?
                }
                Step::Transpose => g.transpose(x)?,
                Step::ScalarMul(s) => g.scalar_mul(x, *s)?,
                Step::MatMul(_) => {
                    next += 1;
                    g.matmul(x, vars[next - 1])?
                }
                Step::Add | Step::AddRowBias => {
                    next += 1;
                    g.add(x, vars[next - 1])?
                }
                Step::Sub => {
                    next += 1;
                    g.sub(x, vars[next - 1])?
                }
                Step::Mul | Step::MulScalarLeaf => {
                    next += 1;
                    g.mul(x, vars[next - 1])?
                }
                Step::L2Normalize => g.l2_normalize(x)?,
                Step::LogSoftmaxRows => g.log_softmax_rows(x)?,
                Step::Diag => g.diag(x)?,
                Step::Mean => g.mean(x)?,
            };
        }
        let w = g.constant(self.readout.clone());
        let weighted = g.mul(x, w)?;
        let loss = g.sum(weighted)?;
        Ok((g, loss, vars, relu_inputs))
    }

    pub fn loss_at(&self, leaves: &[Tensor]) -> f64 {
        let (g, loss, _, _) = self.build(leaves).unwrap();
        g.value(loss).item().unwrap()
    }

    /// True when some ReLU input sits within `margin` of its kink.
    pub fn near_kink(&self, margin: f64) -> bool {
        let (g, _, _, relu_inputs) = self.build(&self.leaves).unwrap();
        relu_inputs
            .iter()
            .any(|&v| g.value(v).data().iter().any(|x| x.abs() < margin))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning finite-difference round-off into a huge relative error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error of the tape's gradients against central differences.
pub fn gradient_check(graph: &RandomGraph, h: f64, floor: f64) -> f64 {
    let (g, loss, vars, _) = graph.build(&graph.leaves).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (li, (&var, leaf)) in vars.iter().zip(&graph.leaves).enumerate() {
        let analytic = grads.get_or_zeros(var, leaf.shape());
        for e in 0..leaf.len() {
            let mut plus = graph.leaves.clone();
            plus[li].data_mut()[e] += h;
            let mut minus = graph.leaves.clone();
            minus[li].data_mut()[e] -= h;
            let numeric = (graph.loss_at(&plus) - graph.loss_at(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], numeric, floor));
        }
    }
    worst
}

// ------------------------------------------------------------------ k-means

pub fn rows(w: &Tensor) -> Vec<Vec<f64>> {
    (0..w.rows()).map(|i| w.row(i).to_vec()).collect()
}

/// Sum of squared distances to cluster means; `None` if a cluster is empty.
pub fn assignment_cost(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Option<f64> {
    let n = points[0].len();
    let mut sums = vec![vec![0.0; n]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|x| x / c as f64).collect())
        .collect();
    Some(
        points
            .iter()
            .zip(assignment)
            .map(|(p, &a)| p.iter().zip(&means[a]).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum(),
    )
}

/// Minimum within-cluster sum of squares over all `k^m` assignments with no
/// empty cluster.
pub fn brute_force_kmeans(points: &[Vec<f64>], k: usize) -> f64 {
    let m = points.len();
    let total = k.pow(m as u32);
    let mut best = f64::INFINITY;
    let mut assignment = vec![0usize; m];
    for code in 0..total {
        let mut c = code;
        for a in assignment.iter_mut() {
            *a = c % k;
            c /= k;
        }
        if let Some(cost) = assignment_cost(points, &assignment, k) {
            best = best.min(cost);
        }
    }
    best
}

// --------------------------------------------------------------------- SVD

pub fn to_nalgebra(t: &Tensor) -> nalgebra::DMatrix<f64> {
    let (m, n) = t.dims2().unwrap();
    nalgebra::DMatrix::from_row_slice(m, n, t.data())
}

/// Smallest `‖W − M‖_F²` over rank-`k` matrices `M`: the discarded squared
/// singular values.
pub fn eckart_young_bound(w: &Tensor, k: usize) -> f64 {
    let mut sv: Vec<f64> = to_nalgebra(w).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.iter().skip(k).map(|s| s * s).sum()
}

// ------------------------------------------------------------------- recall

/// Recall@k by sorting each row (stable, so ties keep index order).
pub fn brute_force_recall(sim: &Tensor, k: usize) -> f64 {
    let n = sim.rows();
    let mut hits = 0;
    for i in 0..n {
        let row = sim.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        if order.iter().take(k).any(|&j| j == i) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
