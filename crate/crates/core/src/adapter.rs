//! Low-rank adapters attached to a frozen weight `W0 ∈ R^{m×n}`.
//!
//! An adapted layer computes `Y = X·W0 + α·X·A·B` with `A ∈ R^{m×k}`,
//! `B ∈ R^{k×n}` and a scalar `α`. Three initialisations are supported:
//!
//! * **standard**: `A ~ N(0, σ²)`, `B = 0`, so the adapter is an exact no-op
//!   before the first update;
//! * **cluster**: k-means over the `m` rows of `W0`; `A` takes the `m × k`
//!   row-to-centre distance matrix and `B` the `k × n` centres;
//! * **cluster + aligned**: cluster init followed by gradient descent on
//!   `‖W0 − A·B‖_F²`.
//!
//! When the adaptive update is enabled `α` is trainable and starts at
//! [`ADAPTIVE_ALPHA_INIT`]; otherwise it is fixed at 1.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, ClusterResult, KMeansParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ADAPTER_MAGIC: &[u8; 4] = b"ADVA";
pub const DEFAULT_RANK: usize = 10;
pub const ADAPTIVE_ALPHA_INIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Vision,
    Text,
}

impl Tower {
    pub const BOTH: [Tower; 2] = [Tower::Vision, Tower::Text];

    pub fn name(self) -> &'static str {
        match self {
            Tower::Vision => "vision",
            Tower::Text => "text",
        }
    }
}

/// Which dense layer an adapter is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub tower: Tower,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Standard,
    Cluster,
    ClusterAligned,
    /// Standard init followed by alignment (PA without PC).
    StandardAligned,
}

impl InitKind {
    fn tag(self) -> u8 {
        match self {
            InitKind::Standard => 0,
            InitKind::Cluster => 1,
            InitKind::ClusterAligned => 2,
            InitKind::StandardAligned => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [
            InitKind::Standard,
            InitKind::Cluster,
            InitKind::ClusterAligned,
            InitKind::StandardAligned,
        ]
        .into_iter()
        .find(|k| k.tag() == t)
    }

    fn aligned(self) -> InitKind {
        match self {
            InitKind::Standard | InitKind::StandardAligned => InitKind::StandardAligned,
            InitKind::Cluster | InitKind::ClusterAligned => InitKind::ClusterAligned,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: LayerId,
    /// `m × k`
    pub a: Tensor,
    /// `k × n`
    pub b: Tensor,
    pub alpha: f64,
    pub alpha_trainable: bool,
    pub rank: usize,
    pub init_kind: InitKind,
}

fn check_rank(m: usize, n: usize, k: usize) -> Result<()> {
    if k == 0 || k > m.min(n) {
        return Err(Error::config(format!(
            "rank {k} must be in 1..=min(m, n) = {}",
            m.min(n)
        )));
    }
    Ok(())
}

impl LoraAdapter {
    /// Gaussian `A`, zero `B`, fixed `α = 1`.
    pub fn standard(layer: LayerId, m: usize, n: usize, k: usize, sigma: f64, rng: &mut Rng) -> Result<Self> {
        check_rank(m, n, k)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        let a = (0..m * k).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            layer,
            a: Tensor::matrix(m, k, a)?,
            b: Tensor::zeros(&[k, n]),
            alpha: 1.0,
            alpha_trainable: false,
            rank: k,
            init_kind: InitKind::Standard,
        })
    }

    /// `A := D` (row-to-centre distances), `B := C` (centres), `α = alpha`.
    pub fn from_clusters(layer: LayerId, clusters: &ClusterResult, alpha: f64) -> Result<Self> {
        let (m, k) = clusters.distances.dims2()?;
        let (k2, n) = clusters.centers.dims2()?;
        if k != k2 {
            return Err(Error::dim("distance and centre matrices disagree on k"));
        }
        check_rank(m, n, k)?;
        Ok(Self {
            layer,
            a: clusters.distances.clone(),
            b: clusters.centers.clone(),
            alpha,
            alpha_trainable: false,
            rank: k,
            init_kind: InitKind::Cluster,
        })
    }

    /// Runs k-means on the rows of `w0` and builds the adapter from the result.
    pub fn cluster(
        layer: LayerId,
        w0: &Tensor,
        k: usize,
        params: &KMeansParams,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<(Self, ClusterResult)> {
        let (m, n) = w0.dims2()?;
        check_rank(m, n, k)?;
        let clusters = kmeans(w0, k, params, rng)?;
        let adapter = Self::from_clusters(layer, &clusters, alpha)?;
        Ok((adapter, clusters))
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    /// Number of entries in `A` and `B`.
    pub fn matrix_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Trainable scalar count: `A`, `B` and `α` when it is trainable.
    pub fn tunable_params(&self) -> usize {
        self.matrix_params() + usize::from(self.alpha_trainable)
    }

    pub fn check_layer(&self, m: usize, n: usize) -> Result<()> {
        if self.a.shape() != [m, self.rank] || self.b.shape() != [self.rank, n] {
            return Err(Error::config(format!(
                "adapter {:?} has A {:?}, B {:?}; layer is {m}x{n}",
                self.layer,
                self.a.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }

    /// `A·B`
    pub fn product(&self) -> Result<Tensor> {
        self.a.matmul(&self.b)
    }

    /// `α·(X·A)·B`, the adapter's share of the layer output.
    pub fn forward_contribution(&self, x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.dims2()?;
        if cols != self.in_dim() {
            return Err(Error::dim(format!(
                "input has {cols} columns, adapter expects {}",
                self.in_dim()
            )));
        }
        Ok(x.matmul(&self.a)?.matmul(&self.b)?.scale(self.alpha))
    }

    /// `W0 + α·A·B`
    pub fn merge(&self, w0: &Tensor) -> Result<Tensor> {
        let (m, n) = w0.dims2()?;
        if m != self.in_dim() || n != self.out_dim() {
            return Err(Error::dim(format!(
                "cannot merge {}x{} adapter into {m}x{n} weight",
                self.in_dim(),
                self.out_dim()
            )));
        }
        w0.add(&self.product()?.scale(self.alpha))
    }

    /// `‖W0 − A·B‖_F²`
    pub fn alignment_loss(&self, w0: &Tensor) -> Result<f64> {
        Ok(w0.sub(&self.product()?)?.sum_squares())
    }

    /// Gradient descent on `‖W0 − A·B‖_F²`. A step that would raise the loss
    /// is rejected and the learning rate halved, so the recorded loss never
    /// increases. Stops when an accepted step improves the loss by less than
    /// `rel_tol` (relative), when the loss hits zero, or after `max_steps`.
    pub fn align(&mut self, w0: &Tensor, params: &AlignParams) -> Result<AlignReport> {
        let (m, n) = w0.dims2()?;
        self.check_layer(m, n)?;
        params.validate()?;
        let mut loss = self.alignment_loss(w0)?;
        if !loss.is_finite() {
            return Err(Error::Optimization("alignment loss is not finite at start".into()));
        }
        let mut report = AlignReport {
            initial_loss: loss,
            final_loss: loss,
            steps: 0,
            accepted_steps: 0,
            stopped_on_tolerance: false,
            loss_history: vec![loss],
        };
        let mut lr = params.lr;
        while report.steps < params.max_steps {
            if loss == 0.0 {
                report.stopped_on_tolerance = true;
                break;
            }
            report.steps += 1;
            let residual = w0.sub(&self.product()?)?;
            // ∇A = −2 R Bᵀ, ∇B = −2 Aᵀ R
            let grad_a = residual.matmul(&self.b.transpose()?)?.scale(-2.0);
            let grad_b = self.a.transpose()?.matmul(&residual)?.scale(-2.0);
            let cand_a = self.a.sub(&grad_a.scale(lr))?;
            let cand_b = self.b.sub(&grad_b.scale(lr))?;
            let cand_loss = w0.sub(&cand_a.matmul(&cand_b)?)?.sum_squares();
            if !cand_loss.is_finite() && lr < f64::MIN_POSITIVE {
                return Err(Error::Optimization("alignment diverged".into()));
            }
            if cand_loss.is_finite() && cand_loss <= loss {
                let improvement = (loss - cand_loss) / loss;
                self.a = cand_a;
                self.b = cand_b;
                loss = cand_loss;
                report.accepted_steps += 1;
                report.loss_history.push(loss);
                if improvement < params.rel_tol {
                    report.stopped_on_tolerance = true;
                    break;
                }
            } else {
                lr *= 0.5;
            }
        }
        report.final_loss = loss;
        if report.accepted_steps > 0 {
            self.init_kind = self.init_kind.aligned();
        }
        Ok(report)
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u8(match self.layer.tower {
            Tower::Vision => 0,
            Tower::Text => 1,
        });
        e.u32(self.layer.index as u32);
        e.u32(self.rank as u32);
        e.u8(self.init_kind.tag());
        e.u8(u8::from(self.alpha_trainable));
        e.f64(self.alpha);
        e.tensor(&self.a);
        e.tensor(&self.b);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let at = d.offset();
        let tower = match d.u8()? {
            0 => Tower::Vision,
            1 => Tower::Text,
            t => return Err(Error::format(at, format!("unknown tower tag {t}"))),
        };
        let index = d.u32()? as usize;
        let rank = d.u32()? as usize;
        let at = d.offset();
        let init_kind =
            InitKind::from_tag(d.u8()?).ok_or_else(|| Error::format(at, "unknown init kind"))?;
        let alpha_trainable = d.u8()? != 0;
        let alpha = d.f64()?;
        let at = d.offset();
        let a = d.tensor()?;
        let b = d.tensor()?;
        let adapter = Self {
            layer: LayerId { tower, index },
            a,
            b,
            alpha,
            alpha_trainable,
            rank,
            init_kind,
        };
        let (m, n) = (adapter.a.rows(), adapter.b.cols());
        adapter
            .check_layer(m, n)
            .map_err(|e| Error::format(at, e.to_string()))?;
        Ok(adapter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub lr: f64,
    pub max_steps: usize,
    pub rel_tol: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_steps: 1000,
            rel_tol: 1e-6,
        }
    }
}

impl AlignParams {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.rel_tol < 0.0 {
            return Err(Error::config("align needs lr > 0 and rel_tol >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Gradient evaluations, accepted or not.
    pub steps: usize,
    pub accepted_steps: usize,
    pub stopped_on_tolerance: bool,
    /// Loss before the first step and after every accepted step.
    pub loss_history: Vec<f64>,
}

/// Adapters for every adapted layer, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn get(&self, layer: LayerId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer == layer)
    }

    pub fn tunable_params(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::tunable_params).sum()
    }

    pub fn matrix_params(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::matrix_params).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(ADAPTER_MAGIC);
        e.u32(self.adapters.len() as u32);
        for a in &self.adapters {
            a.encode(&mut e);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, ADAPTER_MAGIC)?;
        let n = d.u32()?;
        let adapters = (0..n).map(|_| LoraAdapter::decode(&mut d)).collect::<Result<_>>()?;
        d.expect_end()?;
        Ok(Self { adapters })
    }
}
