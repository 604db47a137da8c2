//! Adaptation loops over a frozen backbone.
//!
//! Per batch the adversarial loop (1) computes the clean loss, (2) attacks the
//! pixel views against the *current* parameters, (3) computes the loss on the
//! attacked batch and (4) updates only the method's tunable set with AdamW
//! under a cosine schedule. Adversarial examples are regenerated every step.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    AdapterSet, AlignParams, AlignReport, LayerId, LoraAdapter, Tower, ADAPTIVE_ALPHA_INIT,
    DEFAULT_RANK,
};
use crate::attack::{self, AttackSpec};
use crate::autodiff::Graph;
use crate::dataset::DatasetSplit;
use crate::encoder::{ArchConfig, DenseLayer, DualEncoder, Activation, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::eval::{self, mean_rmean, Condition, EvalOptions};
use crate::kmeans::KMeansParams;
use crate::model::{pair_loss, ContrastiveObjective, LinearProbe, ModelView, TunableState};
use crate::optim::{clip_global_norm, cosine_lr, AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AdvLora,
    Lora,
    LinearProbe,
    FullFt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AdvLora => "advlora",
            Method::Lora => "lora",
            Method::LinearProbe => "lp",
            Method::FullFt => "fft",
        }
    }

    fn uses_frozen_backbone(self) -> bool {
        !matches!(self, Method::FullFt)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advlora" => Ok(Method::AdvLora),
            "lora" => Ok(Method::Lora),
            "lp" | "linear_probe" => Ok(Method::LinearProbe),
            "fft" | "full_ft" => Ok(Method::FullFt),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }
}

/// Parameter clustering, parameter alignment, adaptive update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub pc: bool,
    pub pa: bool,
    pub pu: bool,
}

impl Toggles {
    pub const OFF: Toggles = Toggles {
        pc: false,
        pa: false,
        pu: false,
    };
    pub const ALL: Toggles = Toggles {
        pc: true,
        pa: true,
        pu: true,
    };

    /// `baseline`, `pc`, `pc+pa`, `pc+pa+pu`, ...
    pub fn label(self) -> String {
        let parts: Vec<&str> = [(self.pc, "pc"), (self.pa, "pa"), (self.pu, "pu")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    pub adversarial: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub attack: AttackSpec,
    pub seed: u64,
    pub toggles: Toggles,
    pub rank: usize,
    /// Std of `A` under the standard init.
    pub lora_sigma: f64,
    pub alpha_init: f64,
    pub kmeans: KMeansParams,
    pub align: AlignParams,
    /// Also train on the clean batch each step (off: adversarial examples only).
    pub mix_clean: bool,
    /// Natural and attacked validation R@Mean after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::AdvLora,
            adversarial: true,
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
            attack: AttackSpec::default(),
            seed: 0,
            toggles: Toggles::ALL,
            rank: DEFAULT_RANK,
            lora_sigma: 0.02,
            alpha_init: ADAPTIVE_ALPHA_INIT,
            kmeans: KMeansParams::default(),
            align: AlignParams::default(),
            mix_clean: false,
            eval_each_epoch: true,
        }
    }
}

impl AdaptConfig {
    pub fn for_method(method: Method) -> Self {
        let toggles = if method == Method::AdvLora {
            Toggles::ALL
        } else {
            Toggles::OFF
        };
        Self {
            method,
            toggles,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method != Method::AdvLora && self.toggles != Toggles::OFF {
            return Err(Error::config(format!(
                "PC/PA/PU toggles only apply to advlora, not {}",
                self.method.name()
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.adversarial {
            self.attack.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Loss the update was computed from.
    pub loss: f64,
    /// Loss of the clean batch at the same parameters.
    pub clean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_natural_rmean: Option<f64>,
    pub val_attacked_rmean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub tunable_params: usize,
    /// Entries of the adapter `A`/`B` matrices (0 for non-adapter methods).
    pub adapter_matrix_params: usize,
    /// Seconds per epoch. Not part of the reproducible record.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

impl TrainLog {
    /// Line-delimited JSON: step records, epoch records, then a summary.
    /// Wall-clock times are left out so identical runs give identical files.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{}",
                serde_json::json!({"kind": "step", "step": r.step, "epoch": r.epoch,
                    "loss": r.loss, "clean_loss": r.clean_loss})
            );
        }
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}",
                serde_json::json!({"kind": "epoch", "epoch": r.epoch,
                    "val_natural_rmean": r.val_natural_rmean,
                    "val_attacked_rmean": r.val_attacked_rmean})
            );
        }
        let _ = writeln!(
            s,
            "{}",
            serde_json::json!({"kind": "summary", "tunable_params": self.tunable_params,
                "adapter_matrix_params": self.adapter_matrix_params})
        );
        s
    }

    pub fn timings_jsonl(&self) -> String {
        self.wall_clock
            .iter()
            .enumerate()
            .map(|(e, t)| format!("{}\n", serde_json::json!({"epoch": e, "seconds": t})))
            .collect()
    }
}

/// What building the tunable set did to each adapted layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitReport {
    pub align: Vec<(LayerId, AlignReport)>,
}

/// Builds the tunable set for `config.method` on top of `base`.
pub fn build_method_state(base: &DualEncoder, config: &AdaptConfig) -> Result<(TunableState, InitReport)> {
    let mut report = InitReport::default();
    let state = match config.method {
        Method::AdvLora | Method::Lora => {
            let toggles = config.toggles;
            let mut adapters = Vec::new();
            for (ordinal, id) in base.layer_ids().into_iter().enumerate() {
                let layer = base.layer(id).expect("listed layer exists");
                let w0 = &layer.weight;
                let (m, n) = w0.dims2()?;
                let mut r = rng::substream(config.seed, rng::INIT, ordinal as u64);
                let alpha = if toggles.pu { config.alpha_init } else { 1.0 };
                let mut ad = if toggles.pc {
                    LoraAdapter::cluster(id, w0, config.rank, &config.kmeans, alpha, &mut r)?.0
                } else {
                    let mut ad = LoraAdapter::standard(id, m, n, config.rank, config.lora_sigma, &mut r)?;
                    ad.alpha = alpha;
                    ad
                };
                ad.alpha_trainable = toggles.pu;
                if toggles.pa {
                    let rep = ad.align(w0, &config.align)?;
                    report.align.push((id, rep));
                }
                adapters.push(ad);
            }
            TunableState::Adapters(AdapterSet { adapters })
        }
        Method::LinearProbe => {
            let mut heads = Vec::new();
            for tower in Tower::BOTH {
                let last = base.stack(tower).layers.last().expect("non-empty stack");
                let mut r = rng::substream(config.seed, rng::INIT, 1000 + tower as u64);
                heads.push(DenseLayer::init(last.in_dim(), last.out_dim(), Activation::Identity, &mut r));
            }
            let text_head = heads.pop().expect("two heads");
            let vision_head = heads.pop().expect("two heads");
            TunableState::LinearProbe(LinearProbe {
                vision_head,
                text_head,
            })
        }
        Method::FullFt => {
            let mut copy = base.clone();
            copy.vision.frozen = false;
            copy.text.frozen = false;
            TunableState::Full(copy)
        }
    };
    Ok((state, report))
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: TunableState,
    pub log: TrainLog,
    pub init: InitReport,
}

/// Options shared by adaptation and pretraining.
#[derive(Debug, Clone)]
struct LoopOptions {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    adamw: AdamWConfig,
    clip_norm: f64,
    attack: Option<AttackSpec>,
    mix_clean: bool,
    seed: u64,
    eval_attack: Option<AttackSpec>,
    eval_each_epoch: bool,
}

/// Shuffled mini-batches of `0..n` for one epoch; a trailing batch smaller
/// than two is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, rng::SHUFFLE, epoch as u64));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn train_loop(
    base: &DualEncoder,
    state: &mut TunableState,
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    opts: &LoopOptions,
) -> Result<TrainLog> {
    let v_all = train.views_v();
    let w_all = train.views_w();
    let per_epoch = epoch_batches(train.len(), opts.batch_size, opts.seed, 0).len();
    let total_steps = per_epoch * opts.epochs;
    let mut optimizer = AdamW::new(state.num_params(), opts.adamw);
    let mut attack_rng = rng::stream(opts.seed, rng::ATTACK);
    let mut log = TrainLog {
        tunable_params: state.num_params(),
        adapter_matrix_params: state.adapters().map_or(0, AdapterSet::matrix_params),
        ..TrainLog::default()
    };
    let mut step = 0;

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        for idx in epoch_batches(train.len(), opts.batch_size, opts.seed, epoch) {
            let vb = v_all.select_rows(&idx)?;
            let wb = w_all.select_rows(&idx)?;
            let view = ModelView::new(base, state);
            let clean_loss = view.loss(&vb, &wb)?;
            let inputs: Vec<Tensor> = match &opts.attack {
                Some(spec) => {
                    let objective = ContrastiveObjective { model: view, text: &wb };
                    let adv = attack::run(&objective, &vb, spec, &mut attack_rng)
                        .map_err(|e| Error::Training {
                            step,
                            message: format!("attack failed: {e}"),
                        })?;
                    if opts.mix_clean {
                        vec![adv.v_adv, vb]
                    } else {
                        vec![adv.v_adv]
                    }
                }
                None => vec![vb],
            };

            let mut g = Graph::new();
            let bound = view.bind(&mut g, true)?;
            let wx = g.constant(wb);
            let mut total = None;
            for v in inputs {
                let vx = g.constant(v);
                let l = pair_loss(&mut g, &bound, vx, wx, view.temperature()).map_err(|e| {
                    Error::Training {
                        step,
                        message: e.to_string(),
                    }
                })?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let loss_var = total.expect("at least one input");
            let loss = g.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite loss {loss}"),
                });
            }
            let grads = g.backward(loss_var)?;
            let mut flat = bound.flat_grad(&g, &grads);
            drop(g);
            if flat.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training {
                    step,
                    message: "non-finite gradient".into(),
                });
            }
            clip_global_norm(&mut flat, opts.clip_norm);
            let mut params = state.flat_params();
            optimizer.step(&mut params, &flat, cosine_lr(opts.lr, step, total_steps));
            state.set_flat_params(&params)?;

            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                clean_loss,
            });
            step += 1;
        }
        log.wall_clock.push(started.elapsed().as_secs_f64());

        let mut record = EpochRecord {
            epoch,
            val_natural_rmean: None,
            val_attacked_rmean: None,
        };
        if let (Some(val), true) = (val, opts.eval_each_epoch) {
            let view = ModelView::new(base, state);
            let eo = EvalOptions {
                attack_batch: None,
                seed: opts.seed,
            };
            let nat = eval::evaluate(view, val, &Condition::Natural, "val", &eo)?;
            record.val_natural_rmean = Some(mean_rmean(&nat));
            if let Some(spec) = opts.eval_attack {
                let att = eval::evaluate(view, val, &Condition::Attacked(spec), "val", &eo)?;
                record.val_attacked_rmean = Some(mean_rmean(&att));
            }
        }
        log.epochs.push(record);
    }
    Ok(log)
}

fn adapt(
    base: &DualEncoder,
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    config: &AdaptConfig,
    adversarial: bool,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if config.method.uses_frozen_backbone() && !base.is_frozen() {
        return Err(Error::Contract(format!(
            "{} adaptation needs a frozen backbone",
            config.method.name()
        )));
    }
    let (mut state, init) = build_method_state(base, config)?;
    let opts = LoopOptions {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        adamw: config.adamw,
        clip_norm: config.clip_norm,
        attack: adversarial.then_some(config.attack),
        mix_clean: config.mix_clean,
        seed: config.seed,
        eval_attack: Some(config.attack),
        eval_each_epoch: config.eval_each_epoch,
    };
    let log = train_loop(base, &mut state, train, val, &opts)?;
    Ok(AdaptOutcome { state, log, init })
}

/// Adapter (or probe / full) training on adversarial examples regenerated
/// against the current parameters every step.
pub fn adversarial_adapt(
    base: &DualEncoder,
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    adapt(base, train, val, config, true)
}

/// Same loop on clean inputs.
pub fn natural_adapt(
    base: &DualEncoder,
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    adapt(base, train, val, config, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: ArchConfig,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Trains a fresh dual encoder contrastively on clean data and freezes it.
pub fn pretrain(train: &DatasetSplit, val: Option<&DatasetSplit>, config: &PretrainConfig) -> Result<(DualEncoder, TrainLog)> {
    if train.params.d_v != config.arch.d_v || train.params.d_w != config.arch.d_w {
        return Err(Error::config(format!(
            "architecture expects d_v={}, d_w={}; data has d_v={}, d_w={}",
            config.arch.d_v, config.arch.d_w, train.params.d_v, train.params.d_w
        )));
    }
    if config.batch_size < 2 {
        return Err(Error::config("batch size must be at least 2"));
    }
    let fresh = DualEncoder::init(&config.arch, config.temperature, config.seed)?;
    let mut state = TunableState::Full(fresh.clone());
    let opts = LoopOptions {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        adamw: AdamWConfig::default(),
        clip_norm: config.clip_norm,
        attack: None,
        mix_clean: false,
        seed: config.seed,
        eval_attack: None,
        eval_each_epoch: true,
    };
    let log = train_loop(&fresh, &mut state, train, val, &opts)?;
    let TunableState::Full(mut model) = state else {
        unreachable!("pretraining tunes a full copy")
    };
    model.freeze();
    Ok((model, log))
}
