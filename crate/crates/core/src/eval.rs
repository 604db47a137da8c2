//! Bidirectional Recall@K under natural and attacked conditions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::Tower;
use crate::attack::{self, AttackSpec};
use crate::dataset::DatasetSplit;
use crate::encoder::similarity_matrix;
use crate::error::{Error, Result};
use crate::model::{ContrastiveObjective, ModelView};
use crate::rng;
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// pixel-view query, text-view gallery
    #[serde(rename = "v2w")]
    VisionToText,
    #[serde(rename = "w2v")]
    TextToVision,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::VisionToText => "v2w",
            Direction::TextToVision => "w2v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Natural,
    Attacked(AttackSpec),
}

impl Condition {
    pub fn label(&self) -> String {
        match self {
            Condition::Natural => "natural".into(),
            Condition::Attacked(spec) => spec.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub method: String,
    pub condition: String,
    pub direction: Direction,
    /// k → fraction of queries whose match ranks in the top k
    pub recall_at: BTreeMap<usize, f64>,
    pub r_mean: f64,
    pub seed: u64,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Rank (0-based) of the true match `i` in row `i`; ties go to the lower index.
fn true_rank(sim: &Tensor, i: usize) -> usize {
    let row = sim.row(i);
    let target = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < i))
        .count()
}

/// Fraction of rows whose diagonal entry ranks within the top `k`.
pub fn recall_at_k(sim: &Tensor, k: usize) -> Result<f64> {
    let (r, c) = sim.dims2()?;
    if r != c {
        return Err(Error::dim(format!("similarity must be square, got {r}x{c}")));
    }
    if k == 0 || k > r {
        return Err(Error::config(format!("k = {k} must be in 1..={r}")));
    }
    let hits = (0..r).filter(|&i| true_rank(sim, i) < k).count();
    Ok(hits as f64 / r as f64)
}

/// Reports for both directions of one similarity matrix.
pub fn reports_from_similarity(sim: &Tensor, method: &str, condition: &str, seed: u64) -> Result<[RetrievalReport; 2]> {
    let transposed = sim.transpose()?;
    let one = |s: &Tensor, direction| -> Result<RetrievalReport> {
        let n = s.rows();
        let mut recall_at = BTreeMap::new();
        for k in RECALL_KS {
            recall_at.insert(k, recall_at_k(s, k.min(n))?);
        }
        let r_mean = recall_at.values().sum::<f64>() / RECALL_KS.len() as f64;
        Ok(RetrievalReport {
            method: method.to_string(),
            condition: condition.to_string(),
            direction,
            recall_at,
            r_mean,
            seed,
        })
    };
    Ok([one(sim, Direction::VisionToText)?, one(&transposed, Direction::TextToVision)?])
}

/// Average R@Mean over the two directions.
pub fn mean_rmean(reports: &[RetrievalReport; 2]) -> f64 {
    (reports[0].r_mean + reports[1].r_mean) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Samples attacked jointly; `None` attacks the whole split as one batch.
    pub attack_batch: Option<usize>,
    pub seed: u64,
}

/// Pixel views of `split`, attacked against `model` when `condition` says so.
pub fn attacked_views(model: ModelView<'_>, split: &DatasetSplit, spec: &AttackSpec, opts: &EvalOptions) -> Result<Tensor> {
    let v = split.views_v();
    let w = split.views_w();
    let n = split.len();
    let chunk = opts.attack_batch.unwrap_or(n).clamp(2, n.max(2));
    let mut rng = rng::stream(opts.seed, rng::ATTACK);
    let mut out = Vec::with_capacity(v.len());
    let mut start = 0;
    while start < n {
        // a trailing singleton is folded into the previous chunk
        let mut end = (start + chunk).min(n);
        if n - end == 1 {
            end = n;
        }
        let idx: Vec<usize> = (start..end).collect();
        let vb = v.select_rows(&idx)?;
        let wb = w.select_rows(&idx)?;
        let objective = ContrastiveObjective { model, text: &wb };
        let adv = attack::run(&objective, &vb, spec, &mut rng)?;
        out.extend_from_slice(adv.v_adv.data());
        start = end;
    }
    Tensor::matrix(n, v.cols(), out)
}

/// Embeds the split (attacking pixel views first if requested) and scores both directions.
pub fn evaluate(
    model: ModelView<'_>,
    split: &DatasetSplit,
    condition: &Condition,
    method: &str,
    opts: &EvalOptions,
) -> Result<[RetrievalReport; 2]> {
    if split.len() < 2 {
        return Err(Error::config("evaluation needs at least two samples"));
    }
    let v = match condition {
        Condition::Natural => split.views_v(),
        Condition::Attacked(spec) => attacked_views(model, split, spec, opts)?,
    };
    let zv = model.embed(Tower::Vision, &v)?;
    let zw = model.embed(Tower::Text, &split.views_w())?;
    let sim = similarity_matrix(&zv, &zw)?;
    reports_from_similarity(&sim, method, &condition.label(), opts.seed)
}

pub const CSV_HEADER: &str = "method,condition,direction,r1,r5,r10,rmean,seed";

pub fn reports_csv(reports: &[RetrievalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.method,
            r.condition,
            r.direction.name(),
            r.recall(1),
            r.recall(5),
            r.recall(10),
            r.r_mean,
            r.seed
        );
    }
    s
}

/// One row per `(method, condition, seed)` with both directions and their mean.
pub fn mean_table_csv(reports: &[RetrievalReport]) -> String {
    let mut groups: BTreeMap<(String, String, u64), Vec<&RetrievalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.method.clone(), r.condition.clone(), r.seed))
            .or_default()
            .push(r);
    }
    let mut s = String::from("method,condition,seed,v2w_rmean,w2v_rmean,mean\n");
    for ((method, condition, seed), rs) in groups {
        let get = |d: Direction| rs.iter().find(|r| r.direction == d).map_or(f64::NAN, |r| r.r_mean);
        let (a, b) = (get(Direction::VisionToText), get(Direction::TextToVision));
        let _ = writeln!(s, "{method},{condition},{seed},{a:.6},{b:.6},{:.6}", (a + b) / 2.0);
    }
    s
}
