//! Lloyd's k-means over the rows of a weight matrix.
//!
//! Ties in the nearest-centre search go to the lowest cluster index. An empty
//! cluster is re-seeded with the row farthest from its current centre, so the
//! number of clusters never drops below `k`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Seeding {
    /// k-means++: each new centre drawn with probability ∝ squared distance.
    PlusPlus,
    /// `k` distinct rows drawn uniformly.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once no centre moves by more than this (Euclidean).
    pub tol: f64,
    pub seeding: Seeding,
    /// Independent seedings; the run with the lowest objective wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
            seeding: Seeding::PlusPlus,
            restarts: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// `k × n` centres, one per row.
    pub centers: Tensor,
    pub assignment: Vec<usize>,
    /// `m × k` Euclidean distances from every row to every centre.
    pub distances: Tensor,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared distances to the assigned centre after each assignment step.
    pub objective_history: Vec<f64>,
}

impl ClusterResult {
    pub fn objective(&self) -> f64 {
        objective(&self.distances, &self.assignment)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the smallest value, lowest index on ties.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, v) in values.enumerate() {
        if v < best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Sum of squared distances from each row to its assigned centre.
pub fn objective(distances: &Tensor, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| distances.get(i, j).powi(2))
        .sum()
}

fn seed_centers(w: &Tensor, k: usize, seeding: Seeding, rng: &mut Rng) -> Vec<usize> {
    let m = w.rows();
    match seeding {
        Seeding::Uniform => rand::seq::index::sample(rng, m, k).into_vec(),
        Seeding::PlusPlus => {
            let mut chosen = vec![rng.random_range(0..m)];
            let mut best: Vec<f64> = (0..m).map(|i| sq_dist(w.row(i), w.row(chosen[0]))).collect();
            while chosen.len() < k {
                let total: f64 = best.iter().sum();
                let next = if total > 0.0 {
                    let target = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (i, &d) in best.iter().enumerate() {
                        acc += d;
                        if d > 0.0 && acc > target {
                            pick = Some(i);
                            break;
                        }
                    }
                    // rounding can leave `target` past the last positive weight
                    pick.unwrap_or_else(|| best.iter().rposition(|&d| d > 0.0).unwrap_or(0))
                } else {
                    // every row coincides with a chosen centre
                    let free: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
                    free[rng.random_range(0..free.len())]
                };
                chosen.push(next);
                for (i, b) in best.iter_mut().enumerate() {
                    *b = b.min(sq_dist(w.row(i), w.row(next)));
                }
            }
            chosen
        }
    }
}

fn assign(w: &Tensor, centers: &Tensor) -> Vec<usize> {
    (0..w.rows())
        .map(|i| argmin((0..centers.rows()).map(|j| sq_dist(w.row(i), centers.row(j)))))
        .collect()
}

fn distance_matrix(w: &Tensor, centers: &Tensor) -> Tensor {
    let (m, k) = (w.rows(), centers.rows());
    let data = (0..m)
        .flat_map(|i| (0..k).map(move |j| sq_dist(w.row(i), centers.row(j)).sqrt()))
        .collect();
    Tensor::matrix(m, k, data).expect("m×k distances")
}

fn lloyd(w: &Tensor, k: usize, params: &KMeansParams, rng: &mut Rng) -> ClusterResult {
    let (m, n) = (w.rows(), w.cols());
    let seeds = seed_centers(w, k, params.seeding, rng);
    let mut centers = w.select_rows(&seeds).expect("seed rows in range");
    let mut assignment = assign(w, &centers);
    let mut history = vec![objective(&distance_matrix(w, &centers), &assignment)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iter {
        iterations += 1;
        let mut sums = vec![0.0; k * n];
        let mut counts = vec![0usize; k];
        for (i, &j) in assignment.iter().enumerate() {
            counts[j] += 1;
            for (s, x) in sums[j * n..(j + 1) * n].iter_mut().zip(w.row(i)) {
                *s += x;
            }
        }
        let mut next = Tensor::zeros(&[k, n]);
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, s) in next.row_mut(j).iter_mut().zip(&sums[j * n..(j + 1) * n]) {
                    *dst = s / c;
                }
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // farthest row from its (updated) centre becomes a singleton
                let far = (0..m)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .map(|i| (i, sq_dist(w.row(i), next.row(assignment[i]))))
                    .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    });
                if let Some((i, _)) = far {
                    counts[assignment[i]] -= 1;
                    counts[j] = 1;
                    assignment[i] = j;
                    next.row_mut(j).copy_from_slice(w.row(i));
                }
            }
        }
        let shift = (0..k)
            .map(|j| sq_dist(centers.row(j), next.row(j)).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        let new_assignment = assign(w, &centers);
        let stable = new_assignment == assignment;
        assignment = new_assignment;
        history.push(objective(&distance_matrix(w, &centers), &assignment));
        if stable || shift < params.tol {
            converged = true;
            break;
        }
    }

    let distances = distance_matrix(w, &centers);
    ClusterResult {
        centers,
        assignment,
        distances,
        iterations,
        converged,
        objective_history: history,
    }
}

/// Clusters the `m` rows of `w` into `k` groups.
pub fn kmeans(w: &Tensor, k: usize, params: &KMeansParams, rng: &mut Rng) -> Result<ClusterResult> {
    let (m, _) = w.dims2()?;
    if k == 0 || k > m {
        return Err(Error::config(format!("k = {k} must be in 1..={m}")));
    }
    if !w.all_finite() {
        return Err(Error::Domain("k-means input has non-finite entries".into()));
    }
    let mut best: Option<ClusterResult> = None;
    for _ in 0..params.restarts.max(1) {
        let run = lloyd(w, k, params, rng);
        let better = best.as_ref().is_none_or(|b| run.objective() < b.objective());
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
