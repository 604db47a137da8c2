//! Two-tower MLP encoder producing unit-norm embeddings.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{LayerId, LoraAdapter, Tower};
use crate::autodiff::{Graph, Var};
use crate::container::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADVC";
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `m × n`
    pub weight: Tensor,
    /// `n`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Gaussian weights with variance `1/m`, zero bias.
    pub fn init(m: usize, n: usize, activation: Activation, rng: &mut rng::Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("positive std");
        let w = (0..m * n).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(m, n, w).expect("m×n"),
            bias: Tensor::zeros(&[n]),
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub layers: Vec<DenseLayer>,
    pub frozen: bool,
}

impl EncoderStack {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an encoder needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(format!(
                    "layer {l} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.shape() != [l.out_dim()] {
                return Err(Error::config("bias length must equal layer output width"));
            }
        }
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Embeds a batch (`b × in_dim`), applying `Y = X·W0 + α·X·A·B` on layers
    /// that have an adapter. Rows of the result have unit norm.
    pub fn encode(&self, batch: &Tensor, adapters: &[Option<&LoraAdapter>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let bound = bind_stack(&mut g, self, adapters, false)?;
        let z = forward_stack(&mut g, x, &bound)?;
        Ok(g.value(z).clone())
    }
}

/// Architecture of both towers: `d_in → hidden → hidden → d_emb`, tanh on the
/// hidden layers, linear output projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_v: usize,
    pub d_w: usize,
    pub hidden: usize,
    pub d_emb: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_w: 48,
            hidden: 64,
            d_emb: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub vision: EncoderStack,
    pub text: EncoderStack,
    pub temperature: f64,
}

impl DualEncoder {
    pub fn init(arch: &ArchConfig, temperature: f64, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        let mk = |tower: Tower, d_in: usize| {
            let mut r = rng::substream(seed, rng::INIT, tower as u64);
            EncoderStack::new(vec![
                DenseLayer::init(d_in, arch.hidden, Activation::Tanh, &mut r),
                DenseLayer::init(arch.hidden, arch.hidden, Activation::Tanh, &mut r),
                DenseLayer::init(arch.hidden, arch.d_emb, Activation::Identity, &mut r),
            ])
        };
        Ok(Self {
            vision: mk(Tower::Vision, arch.d_v)?,
            text: mk(Tower::Text, arch.d_w)?,
            temperature,
        })
    }

    pub fn stack(&self, tower: Tower) -> &EncoderStack {
        match tower {
            Tower::Vision => &self.vision,
            Tower::Text => &self.text,
        }
    }

    pub fn stack_mut(&mut self, tower: Tower) -> &mut EncoderStack {
        match tower {
            Tower::Vision => &mut self.vision,
            Tower::Text => &mut self.text,
        }
    }

    pub fn layer(&self, id: LayerId) -> Option<&DenseLayer> {
        self.stack(id.tower).layers.get(id.index)
    }

    /// Every dense layer, vision tower first.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        Tower::BOTH
            .into_iter()
            .flat_map(|tower| {
                (0..self.stack(tower).layers.len()).map(move |index| LayerId { tower, index })
            })
            .collect()
    }

    pub fn freeze(&mut self) {
        self.vision.frozen = true;
        self.text.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.vision.frozen && self.text.frozen
    }

    pub fn num_params(&self) -> usize {
        self.vision.num_params() + self.text.num_params()
    }

    /// Bitwise equality of every weight and bias.
    pub fn weights_bitwise_eq(&self, other: &DualEncoder) -> bool {
        Tower::BOTH.into_iter().all(|t| {
            let (a, b) = (self.stack(t), other.stack(t));
            a.layers.len() == b.layers.len()
                && a.layers.iter().zip(&b.layers).all(|(x, y)| {
                    x.weight.bitwise_eq(&y.weight) && x.bias.bitwise_eq(&y.bias)
                })
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(CHECKPOINT_MAGIC);
        e.f64(self.temperature);
        e.u8(u8::from(self.is_frozen()));
        for tower in Tower::BOTH {
            let s = self.stack(tower);
            e.u32(s.layers.len() as u32);
            for l in &s.layers {
                e.u8(match l.activation {
                    Activation::Tanh => 0,
                    Activation::Identity => 1,
                });
                e.tensor(&l.weight);
                e.tensor(&l.bias);
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, CHECKPOINT_MAGIC)?;
        let temperature = d.f64()?;
        let frozen = d.u8()? != 0;
        let mut stacks = Vec::with_capacity(2);
        for _ in Tower::BOTH {
            let at = d.offset();
            let n = d.u32()?;
            if n == 0 || n > 64 {
                return Err(Error::format(at, format!("implausible layer count {n}")));
            }
            let mut layers = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let at = d.offset();
                let activation = match d.u8()? {
                    0 => Activation::Tanh,
                    1 => Activation::Identity,
                    t => return Err(Error::format(at, format!("unknown activation {t}"))),
                };
                let weight = d.tensor()?;
                let bias = d.tensor()?;
                if weight.ndim() != 2 {
                    return Err(Error::format(at, "layer weight must be a matrix"));
                }
                layers.push(DenseLayer {
                    weight,
                    bias,
                    activation,
                });
            }
            let mut stack = EncoderStack::new(layers).map_err(|e| Error::format(at, e.to_string()))?;
            stack.frozen = frozen;
            stacks.push(stack);
        }
        d.expect_end()?;
        let text = stacks.pop().expect("two stacks");
        let vision = stacks.pop().expect("two stacks");
        Ok(Self {
            vision,
            text,
            temperature,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One dense layer whose tensors live on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
    /// `(A, B, α)`
    pub adapter: Option<(Var, Var, Var)>,
}

/// Places a stack's tensors on `g`. Base weights require grad only when
/// `train_base` is set; adapter tensors always do, except a fixed `α`.
pub fn bind_stack(
    g: &mut Graph,
    stack: &EncoderStack,
    adapters: &[Option<&LoraAdapter>],
    train_base: bool,
) -> Result<Vec<BoundLayer>> {
    stack
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let adapter = adapters.get(i).copied().flatten();
            bind_layer(g, layer, adapter, train_base, false)
        })
        .collect()
}

/// Places one layer on `g`; `frozen_adapter` registers the adapter as constants.
pub fn bind_layer(
    g: &mut Graph,
    layer: &DenseLayer,
    adapter: Option<&LoraAdapter>,
    train_base: bool,
    frozen_adapter: bool,
) -> Result<BoundLayer> {
    let weight = g.leaf(layer.weight.clone(), train_base);
    let bias = g.leaf(layer.bias.clone(), train_base);
    let adapter = match adapter {
        Some(ad) => {
            ad.check_layer(layer.in_dim(), layer.out_dim())?;
            let a = g.leaf(ad.a.clone(), !frozen_adapter);
            let b = g.leaf(ad.b.clone(), !frozen_adapter);
            let alpha = g.leaf(Tensor::scalar(ad.alpha), ad.alpha_trainable && !frozen_adapter);
            Some((a, b, alpha))
        }
        None => None,
    };
    Ok(BoundLayer {
        weight,
        bias,
        activation: layer.activation,
        adapter,
    })
}

/// Runs bound layers over `x` and L2-normalizes the output rows.
pub fn forward_stack(g: &mut Graph, x: Var, layers: &[BoundLayer]) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let expected = g.value(layer.weight).rows();
        if g.value(h).cols() != expected {
            return Err(Error::dim(format!(
                "layer expects {expected} input features, batch has {}",
                g.value(h).cols()
            )));
        }
        let mut y = g.matmul(h, layer.weight)?;
        if let Some((a, b, alpha)) = layer.adapter {
            let xa = g.matmul(h, a)?;
            let xab = g.matmul(xa, b)?;
            let scaled = g.mul(xab, alpha)?;
            y = g.add(y, scaled)?;
        }
        y = g.add(y, layer.bias)?;
        h = match layer.activation {
            Activation::Tanh => g.tanh(y)?,
            Activation::Identity => y,
        };
    }
    g.l2_normalize(h)
}

/// Cosine similarity `(i, j) = z_v[i]·z_w[j] / (‖z_v[i]‖‖z_w[j]‖)`.
pub fn similarity_matrix(z_v: &Tensor, z_w: &Tensor) -> Result<Tensor> {
    let (bv, dv) = z_v.dims2()?;
    let (bw, dw) = z_w.dims2()?;
    if dv != dw {
        return Err(Error::dim(format!("embedding widths differ: {dv} vs {dw}")));
    }
    let norms = |z: &Tensor, b: usize| -> Vec<f64> {
        (0..b).map(|i| z.row(i).iter().map(|x| x * x).sum::<f64>()).collect()
    };
    let (nv, nw) = (norms(z_v, bv), norms(z_w, bw));
    let mut out = z_v.matmul(&z_w.transpose()?)?;
    for i in 0..bv {
        for j in 0..bw {
            let denom = (nv[i] * nw[j]).sqrt();
            if denom == 0.0 {
                return Err(Error::Degenerate("zero embedding in similarity".into()));
            }
            out.set(i, j, (out.get(i, j) / denom).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

/// Similarity of already-normalized embeddings on a graph.
pub fn similarity_on_graph(g: &mut Graph, z_v: Var, z_w: Var) -> Result<Var> {
    let t = g.transpose(z_w)?;
    g.matmul(z_v, t)
}

/// Symmetric InfoNCE: mean of row-wise and column-wise cross-entropy of
/// `sim / temperature` against the diagonal.
pub fn contrastive_loss(g: &mut Graph, sim: Var, temperature: f64) -> Result<Var> {
    let (r, c) = g.value(sim).dims2()?;
    if r != c {
        return Err(Error::dim(format!("similarity must be square, got {r}x{c}")));
    }
    if r < 2 {
        return Err(Error::Contract("contrastive loss needs a batch of at least 2".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let logits = g.scalar_mul(sim, 1.0 / temperature)?;
    let rows = g.log_softmax_rows(logits)?;
    let row_diag = g.diag(rows)?;
    let row_mean = g.mean(row_diag)?;
    let logits_t = g.transpose(logits)?;
    let cols = g.log_softmax_rows(logits_t)?;
    let col_diag = g.diag(cols)?;
    let col_mean = g.mean(col_diag)?;
    let total = g.add(row_mean, col_mean)?;
    g.scalar_mul(total, -0.5)
}

/// Plain-tensor evaluation of [`contrastive_loss`].
pub fn contrastive_loss_value(sim: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let l = contrastive_loss(&mut g, s, temperature)?;
    g.value(l).item()
}
