//! A frozen [`DualEncoder`] plus whatever a method tunes on top of it.
//!
//! Every method exposes its tunable parameters as one flat `f64` vector in a
//! fixed order; [`ModelView::bind`] registers graph leaves in that same order,
//! so gradients can be flattened and handed to the optimizer directly.

use std::collections::HashMap;

use crate::adapter::{AdapterSet, LayerId, Tower};
use crate::attack::InputObjective;
use crate::autodiff::{Graph, Var};
use crate::container::{Decoder, Encoder};
use crate::encoder::{
    Activation,
    bind_layer, contrastive_loss, forward_stack, similarity_on_graph, BoundLayer, DenseLayer,
    DualEncoder,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STATE_MAGIC: &[u8; 4] = b"ADVT";

fn encode_layer(e: &mut Encoder, l: &DenseLayer) {
    e.u8(match l.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    });
    e.tensor(&l.weight);
    e.tensor(&l.bias);
}

fn decode_layer(d: &mut Decoder<'_>) -> Result<DenseLayer> {
    let at = d.offset();
    let activation = match d.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        t => return Err(Error::format(at, format!("unknown activation {t}"))),
    };
    let weight = d.tensor()?;
    let bias = d.tensor()?;
    if weight.ndim() != 2 || bias.ndim() != 1 || bias.len() != weight.cols() {
        return Err(Error::format(at, "malformed dense layer"));
    }
    Ok(DenseLayer {
        weight,
        bias,
        activation,
    })
}

/// Fresh output projections for both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub vision_head: DenseLayer,
    pub text_head: DenseLayer,
}

impl LinearProbe {
    fn head(&self, tower: Tower) -> &DenseLayer {
        match tower {
            Tower::Vision => &self.vision_head,
            Tower::Text => &self.text_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TunableState {
    /// Base model only; nothing trainable.
    Frozen,
    Adapters(AdapterSet),
    LinearProbe(LinearProbe),
    /// A trainable copy of every base weight.
    Full(DualEncoder),
}

impl TunableState {
    pub fn num_params(&self) -> usize {
        match self {
            TunableState::Frozen => 0,
            TunableState::Adapters(set) => set.tunable_params(),
            TunableState::LinearProbe(lp) => lp.vision_head.num_params() + lp.text_head.num_params(),
            TunableState::Full(m) => m.num_params(),
        }
    }

    /// Tunable values in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            TunableState::Frozen => {}
            TunableState::Adapters(set) => {
                for ad in &set.adapters {
                    out.extend_from_slice(ad.a.data());
                    out.extend_from_slice(ad.b.data());
                    if ad.alpha_trainable {
                        out.push(ad.alpha);
                    }
                }
            }
            TunableState::LinearProbe(lp) => {
                for head in [&lp.vision_head, &lp.text_head] {
                    out.extend_from_slice(head.weight.data());
                    out.extend_from_slice(head.bias.data());
                }
            }
            TunableState::Full(m) => {
                for tower in Tower::BOTH {
                    for l in &m.stack(tower).layers {
                        out.extend_from_slice(l.weight.data());
                        out.extend_from_slice(l.bias.data());
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`flat_params`](Self::flat_params).
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut rest = values;
        let mut fill = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        match self {
            TunableState::Frozen => {}
            TunableState::Adapters(set) => {
                for ad in &mut set.adapters {
                    fill(ad.a.data_mut());
                    fill(ad.b.data_mut());
                    if ad.alpha_trainable {
                        let mut a = [0.0];
                        fill(&mut a);
                        ad.alpha = a[0];
                    }
                }
            }
            TunableState::LinearProbe(lp) => {
                for head in [&mut lp.vision_head, &mut lp.text_head] {
                    fill(head.weight.data_mut());
                    fill(head.bias.data_mut());
                }
            }
            TunableState::Full(m) => {
                for tower in Tower::BOTH {
                    for l in &mut m.stack_mut(tower).layers {
                        fill(l.weight.data_mut());
                        fill(l.bias.data_mut());
                    }
                }
            }
        }
        Ok(())
    }

    /// `ADVT` container: a tag byte, then adapters and full models as nested
    /// `ADVA`/`ADVC` blobs prefixed by their `u64` length, or the two probe heads.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(STATE_MAGIC);
        let nested = |e: &mut Encoder, blob: Vec<u8>| {
            e.u64(blob.len() as u64);
            e.bytes(&blob);
        };
        match self {
            TunableState::Frozen => e.u8(0),
            TunableState::Adapters(set) => {
                e.u8(1);
                nested(&mut e, set.to_bytes());
            }
            TunableState::LinearProbe(lp) => {
                e.u8(2);
                encode_layer(&mut e, &lp.vision_head);
                encode_layer(&mut e, &lp.text_head);
            }
            TunableState::Full(m) => {
                e.u8(3);
                nested(&mut e, m.to_bytes());
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, STATE_MAGIC)?;
        let at = d.offset();
        let state = match d.u8()? {
            0 => TunableState::Frozen,
            1 => {
                let n = d.len_u64(d.remaining() as u64)?;
                TunableState::Adapters(AdapterSet::from_bytes(d.bytes(n)?)?)
            }
            2 => TunableState::LinearProbe(LinearProbe {
                vision_head: decode_layer(&mut d)?,
                text_head: decode_layer(&mut d)?,
            }),
            3 => {
                let n = d.len_u64(d.remaining() as u64)?;
                TunableState::Full(DualEncoder::from_bytes(d.bytes(n)?)?)
            }
            t => return Err(Error::format(at, format!("unknown state tag {t}"))),
        };
        d.expect_end()?;
        Ok(state)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        match self {
            TunableState::Adapters(set) => Some(set),
            _ => None,
        }
    }
}

/// Both towers bound to one graph.
#[derive(Debug)]
pub struct BoundModel {
    pub vision: Vec<BoundLayer>,
    pub text: Vec<BoundLayer>,
    /// Tunable leaves in canonical order (empty when bound without grad).
    pub params: Vec<Var>,
}

impl BoundModel {
    pub fn tower(&self, tower: Tower) -> &[BoundLayer] {
        match tower {
            Tower::Vision => &self.vision,
            Tower::Text => &self.text,
        }
    }

    /// Concatenated gradients of the tunable leaves, zeros where unreached.
    pub fn flat_grad(&self, g: &Graph, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|&p| grads.get_or_zeros(p, g.value(p).shape()).into_data())
            .collect()
    }
}

/// Read-only view of base model + tuned state.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub base: &'a DualEncoder,
    pub state: &'a TunableState,
}

impl<'a> ModelView<'a> {
    pub fn new(base: &'a DualEncoder, state: &'a TunableState) -> Self {
        Self { base, state }
    }

    pub fn temperature(&self) -> f64 {
        match self.state {
            TunableState::Full(m) => m.temperature,
            _ => self.base.temperature,
        }
    }

    /// Registers every tensor on `g`; tunable ones require grad iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        let mut params = Vec::new();
        let mut vision = Vec::new();
        let mut text = Vec::new();
        match self.state {
            TunableState::Frozen => {
                for tower in Tower::BOTH {
                    let layers = bind_plain(g, self.base, tower, false)?;
                    *pick(&mut vision, &mut text, tower) = layers;
                }
            }
            TunableState::Full(copy) => {
                for tower in Tower::BOTH {
                    let layers = bind_plain(g, copy, tower, trainable)?;
                    if trainable {
                        params.extend(layers.iter().flat_map(|l| [l.weight, l.bias]));
                    }
                    *pick(&mut vision, &mut text, tower) = layers;
                }
            }
            TunableState::LinearProbe(lp) => {
                let mut heads = Vec::new();
                for tower in Tower::BOTH {
                    let head = lp.head(tower);
                    let weight = g.leaf(head.weight.clone(), trainable);
                    let bias = g.leaf(head.bias.clone(), trainable);
                    if trainable {
                        params.extend([weight, bias]);
                    }
                    heads.push(BoundLayer {
                        weight,
                        bias,
                        activation: head.activation,
                        adapter: None,
                    });
                }
                for (tower, head) in Tower::BOTH.into_iter().zip(heads) {
                    let mut layers = bind_plain(g, self.base, tower, false)?;
                    let last = layers.last_mut().expect("non-empty stack");
                    let base_last = self.base.stack(tower).layers.last().expect("non-empty");
                    if lp.head(tower).in_dim() != base_last.in_dim() {
                        return Err(Error::config("probe head width does not match backbone"));
                    }
                    *last = head;
                    *pick(&mut vision, &mut text, tower) = layers;
                }
            }
            TunableState::Adapters(set) => {
                let mut bound: HashMap<LayerId, BoundLayer> = HashMap::new();
                for ad in &set.adapters {
                    let layer = self.base.layer(ad.layer).ok_or_else(|| {
                        Error::config(format!("adapter targets missing layer {:?}", ad.layer))
                    })?;
                    if bound.contains_key(&ad.layer) {
                        return Err(Error::config(format!("two adapters on {:?}", ad.layer)));
                    }
                    let bl = bind_layer(g, layer, Some(ad), false, !trainable)?;
                    if trainable {
                        let (a, b, alpha) = bl.adapter.expect("adapter bound");
                        params.extend([a, b]);
                        if ad.alpha_trainable {
                            params.push(alpha);
                        }
                    }
                    bound.insert(ad.layer, bl);
                }
                for tower in Tower::BOTH {
                    let stack = self.base.stack(tower);
                    let mut layers = Vec::with_capacity(stack.layers.len());
                    for (index, layer) in stack.layers.iter().enumerate() {
                        let id = LayerId { tower, index };
                        match bound.remove(&id) {
                            Some(bl) => layers.push(bl),
                            None => layers.push(bind_layer(g, layer, None, false, true)?),
                        }
                    }
                    *pick(&mut vision, &mut text, tower) = layers;
                }
            }
        }
        Ok(BoundModel {
            vision,
            text,
            params,
        })
    }

    /// Embeds one tower's batch without gradients.
    pub fn embed(&self, tower: Tower, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let x = g.constant(batch.clone());
        let z = forward_stack(&mut g, x, bound.tower(tower))?;
        Ok(g.value(z).clone())
    }

    /// Contrastive loss of the paired batch `(v, w)`.
    pub fn loss(&self, v: &Tensor, w: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let vx = g.constant(v.clone());
        let wx = g.constant(w.clone());
        let loss = pair_loss(&mut g, &bound, vx, wx, self.temperature())?;
        g.value(loss).item()
    }
}

fn pick<'v>(
    vision: &'v mut Vec<BoundLayer>,
    text: &'v mut Vec<BoundLayer>,
    tower: Tower,
) -> &'v mut Vec<BoundLayer> {
    match tower {
        Tower::Vision => vision,
        Tower::Text => text,
    }
}

fn bind_plain(g: &mut Graph, m: &DualEncoder, tower: Tower, trainable: bool) -> Result<Vec<BoundLayer>> {
    m.stack(tower)
        .layers
        .iter()
        .map(|l| bind_layer(g, l, None, trainable, true))
        .collect()
}

/// Contrastive loss of bound towers on inputs already placed on `g`.
pub fn pair_loss(g: &mut Graph, bound: &BoundModel, v: Var, w: Var, temperature: f64) -> Result<Var> {
    let zv = forward_stack(g, v, &bound.vision)?;
    let zw = forward_stack(g, w, &bound.text)?;
    let sim = similarity_on_graph(g, zv, zw)?;
    contrastive_loss(g, sim, temperature)
}

/// Attack objective: contrastive loss of the model on `(v, w)` as a function of `v`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveObjective<'a> {
    pub model: ModelView<'a>,
    pub text: &'a Tensor,
}

impl InputObjective for ContrastiveObjective<'_> {
    fn loss_and_grad(&self, v: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, false)?;
        let vx = g.param(v.clone());
        let wx = g.constant(self.text.clone());
        let loss = pair_loss(&mut g, &bound, vx, wx, self.model.temperature())?;
        let grads = g.backward(loss)?;
        let grad = grads.get_or_zeros(vx, v.shape());
        Ok((g.value(loss).item()?, grad))
    }
}
