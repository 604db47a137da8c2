//! One function per subcommand. Each resolves its parameters, loads inputs,
//! runs the core pipeline and writes its outputs through a [`Run`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

use advlora::attack::AttackFamily;
use advlora::eval::{evaluate, mean_table_csv, reports_csv, EvalOptions};
use advlora::pipeline::{ablate, ablation_csv, rank_sweep, rank_sweep_csv, Fixture, SWEEP_RANKS};
use advlora::trainer::{adversarial_adapt, natural_adapt, pretrain};
use advlora::{
    AdaptConfig, ArchConfig, AttackSpec, Condition, Dataset, DatasetSplit, DualEncoder,
    GeneratorParams, Method, ModelView, PretrainConfig, SplitKind, Toggles, TrainLog, TunableState,
};

use crate::config::{parse_config, switch, usage, List, Num, Resolver};
use crate::manifest::Run;
use crate::{
    AdaptArgs, AdapterArgs, AttackArgs, Cli, Command, EvalArgs, GenDataArgs, OutArgs,
    PretrainArgs, RankSweepArgs, SweepArgs, TrainArgs,
};

pub const DATA_DIR: &str = "data";
pub const CHECKPOINT: &str = "pretrain/model.advc";
pub const STATE_FILE: &str = "state.advt";
pub const ADAPTER_FILE: &str = "adapters.adva";
pub const CHECKPOINT_FILE: &str = "model.advc";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn run(cli: Cli) -> Result<PathBuf> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text)?
        }
        None => Default::default(),
    };
    let mut r = Resolver::new(cli.root.clone(), file);
    match cli.command {
        Command::GenData(a) => gen_data(&mut r, a),
        Command::Pretrain(a) => cmd_pretrain(&mut r, a),
        Command::Adapt(a) => adapt(&mut r, a),
        Command::Eval(a) => eval(&mut r, a),
        Command::Ablate(a) => cmd_ablate(&mut r, a),
        Command::RankSweep(a) => cmd_rank_sweep(&mut r, a),
    }
}

fn start(r: Resolver, command: &'static str, out: PathBuf) -> Result<Run> {
    Run::new(command, out, r.finish()?)
}

fn out_and_seed(r: &mut Resolver, a: &OutArgs, name: &str, seed: u64) -> Result<(PathBuf, u64)> {
    Ok((r.path("out", a.out.clone(), name)?, r.get("seed", a.seed, seed)?))
}

fn split_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(format!("{}.advl", kind.name()))
}

fn load_dataset(run: &mut Run, dir: &Path) -> Result<Dataset> {
    let mut load = |kind| -> Result<DatasetSplit> {
        let p = split_path(dir, kind);
        let split = DatasetSplit::load(&p).with_context(|| format!("loading {}", p.display()))?;
        run.input(&p)?;
        Ok(split)
    };
    Ok(Dataset {
        train: load(SplitKind::Train)?,
        val: load(SplitKind::Val)?,
        test: load(SplitKind::Test)?,
    })
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<DualEncoder> {
    let model = DualEncoder::load(path).with_context(|| format!("loading {}", path.display()))?;
    run.input(path)?;
    Ok(model)
}

fn resolve_train(r: &mut Resolver, a: &TrainArgs, epochs: usize, batch: usize, lr: f64, clip: f64) -> Result<(PathBuf, usize, usize, f64, f64)> {
    Ok((
        r.path("data", a.data.clone(), DATA_DIR)?,
        r.get("epochs", a.epochs, epochs)?,
        r.get("batch_size", a.batch_size, batch)?,
        r.get("lr", a.lr, Num(lr))?.0,
        r.get("clip_norm", a.clip_norm, Num(clip))?.0,
    ))
}

/// `None` for `--attack none`.
fn resolve_attack(r: &mut Resolver, a: &AttackArgs) -> Result<Option<AttackSpec>> {
    let d = AttackSpec::default();
    let family = r.get("attack", a.attack.clone(), "pgd".to_string())?;
    let eps = r.get("eps", a.eps, Num(d.epsilon))?.0;
    let xi = r.get("xi", a.xi, Num(d.xi))?.0;
    let steps = r.get("steps", a.steps, d.steps)?;
    let random_start = r.get("random_start", a.random_start.then_some(true), false)?;
    if family == "none" {
        return Ok(None);
    }
    let spec = match family.parse::<AttackFamily>()? {
        AttackFamily::Fgsm => AttackSpec::fgsm(eps),
        AttackFamily::Pgd => AttackSpec {
            random_start,
            ..AttackSpec::pgd(eps, xi, steps)
        },
        AttackFamily::Bim => AttackSpec::bim(eps, xi, steps),
    };
    if spec.family == AttackFamily::Fgsm && steps != 1 {
        return Err(usage("fgsm takes exactly one step"));
    }
    if spec.family != AttackFamily::Pgd && random_start {
        return Err(usage("--random-start only applies to pgd"));
    }
    spec.validate()?;
    Ok(Some(spec))
}

fn resolve_adapter(r: &mut Resolver, a: &AdapterArgs, base: AdaptConfig, with_rank: bool) -> Result<(PathBuf, AdaptConfig)> {
    let checkpoint = r.path("checkpoint", a.checkpoint.clone(), CHECKPOINT)?;
    let rank = if with_rank {
        r.get("rank", a.rank, base.rank)?
    } else {
        base.rank
    };
    let cfg = AdaptConfig {
        rank,
        lora_sigma: r.get("lora_sigma", a.lora_sigma, Num(base.lora_sigma))?.0,
        alpha_init: r.get("alpha_init", a.alpha_init, Num(base.alpha_init))?.0,
        ..base
    };
    Ok((checkpoint, cfg))
}

fn elapsed(what: &str, t: Instant) {
    eprintln!("{what}: {:.1}s", t.elapsed().as_secs_f64());
}

fn gen_data(r: &mut Resolver, a: GenDataArgs) -> Result<PathBuf> {
    let (out, seed) = out_and_seed(r, &a.common, DATA_DIR, 0)?;
    let d = GeneratorParams::default();
    let params = GeneratorParams {
        num_classes: r.get("num_classes", a.num_classes, d.num_classes)?,
        d_latent: r.get("d_latent", a.d_latent, d.d_latent)?,
        d_v: r.get("d_v", a.d_v, d.d_v)?,
        d_w: r.get("d_w", a.d_w, d.d_w)?,
        noise_sigma: r.get("noise_sigma", a.noise_sigma, Num(d.noise_sigma))?.0,
        instance_spread: r.get("instance_spread", a.instance_spread, Num(d.instance_spread))?.0,
        n_train: r.get("n_train", a.n_train, d.n_train)?,
        n_val: r.get("n_val", a.n_val, d.n_val)?,
        n_test: r.get("n_test", a.n_test, d.n_test)?,
    };
    params.validate()?;
    let mut run = start(take(r), "gen-data", out)?;
    let ds = advlora::dataset::generate(&params, seed)?;
    for kind in SplitKind::ALL {
        run.write(&format!("{}.advl", kind.name()), ds.split(kind).to_bytes())?;
    }
    run.finish()
}

/// Moves the resolver out so it can be consumed by [`start`].
fn take(r: &mut Resolver) -> Resolver {
    let root = r.root().to_path_buf();
    std::mem::replace(r, Resolver::new(root, Default::default()))
}

fn cmd_pretrain(r: &mut Resolver, a: PretrainArgs) -> Result<PathBuf> {
    let (out, seed) = out_and_seed(r, &a.common, "pretrain", 0)?;
    let d = PretrainConfig::default();
    let (data, epochs, batch_size, lr, clip_norm) = resolve_train(r, &a.train, d.epochs, d.batch_size, d.lr, d.clip_norm)?;
    let hidden = r.get("hidden", a.hidden, d.arch.hidden)?;
    let d_emb = r.get("d_emb", a.d_emb, d.arch.d_emb)?;
    let temperature = r.get("temperature", a.temperature, Num(d.temperature))?.0;
    let mut run = start(take(r), "pretrain", out)?;
    let ds = load_dataset(&mut run, &data)?;
    let p = ds.train.params;
    let cfg = PretrainConfig {
        arch: ArchConfig {
            d_v: p.d_v,
            d_w: p.d_w,
            hidden,
            d_emb,
        },
        temperature,
        epochs,
        batch_size,
        lr,
        clip_norm,
        seed,
    };
    let t = Instant::now();
    let (model, log) = pretrain(&ds.train, Some(&ds.val), &cfg)?;
    elapsed("pretrain", t);
    run.write(CHECKPOINT_FILE, model.to_bytes())?;
    run.write(LOG_FILE, log.to_jsonl())?;
    run.finish()
}

fn adapt(r: &mut Resolver, a: AdaptArgs) -> Result<PathBuf> {
    let method: Method = r.get("method", a.method.clone(), "advlora".to_string())?.parse()?;
    let base = AdaptConfig::for_method(method);
    let (out, seed) = out_and_seed(r, &a.common, "adapt", base.seed)?;
    let (data, epochs, batch_size, lr, clip_norm) = resolve_train(r, &a.train, base.epochs, base.batch_size, base.lr, base.clip_norm)?;
    let (checkpoint, base) = resolve_adapter(r, &a.adapter, base, true)?;
    let adversarial = r.get("adversarial", switch(a.adversarial, a.natural), method == Method::AdvLora)?;
    let d = base.toggles;
    let toggles = Toggles {
        pc: r.get("pc", switch(a.pc, a.no_pc), d.pc)?,
        pa: r.get("pa", switch(a.pa, a.no_pa), d.pa)?,
        pu: r.get("pu", switch(a.pu, a.no_pu), d.pu)?,
    };
    let mix_clean = r.get("mix_clean", a.mix_clean.then_some(true), false)?;
    let attack = resolve_attack(r, &a.attack)?;
    let attack = match (adversarial, attack) {
        (true, None) => return Err(usage("adversarial adaptation needs an attack other than none")),
        (_, spec) => spec.unwrap_or_default(),
    };
    let cfg = AdaptConfig {
        adversarial,
        epochs,
        batch_size,
        lr,
        clip_norm,
        attack,
        seed,
        toggles,
        mix_clean,
        ..base
    };
    cfg.validate()?;
    let mut run = start(take(r), "adapt", out)?;
    let ds = load_dataset(&mut run, &data)?;
    let model = load_checkpoint(&mut run, &checkpoint)?;
    let t = Instant::now();
    let outcome = if adversarial {
        adversarial_adapt(&model, &ds.train, Some(&ds.val), &cfg)?
    } else {
        natural_adapt(&model, &ds.train, Some(&ds.val), &cfg)?
    };
    elapsed("adapt", t);
    run.write(STATE_FILE, outcome.state.to_bytes())?;
    if let Some(set) = outcome.state.adapters() {
        run.write(ADAPTER_FILE, set.to_bytes())?;
    }
    run.write(LOG_FILE, outcome.log.to_jsonl())?;
    run.finish()
}

fn eval(r: &mut Resolver, a: EvalArgs) -> Result<PathBuf> {
    let (out, seed) = out_and_seed(r, &a.common, "eval", 0)?;
    let data = r.path("data", a.data.clone(), DATA_DIR)?;
    let checkpoint = r.path("checkpoint", a.checkpoint.clone(), CHECKPOINT)?;
    // empty means the bare checkpoint
    let state_path = r.get("state", a.state.as_ref().map(|p| p.display().to_string()), String::new())?;
    let state_path = (!state_path.is_empty()).then(|| r.root().join(&state_path));
    let split_name = r.get("split", a.split.clone(), "test".to_string())?;
    let kind = SplitKind::ALL
        .into_iter()
        .find(|k| k.name() == split_name)
        .ok_or_else(|| usage(format!("unknown split {split_name:?}")))?;
    let default_label = if state_path.is_some() { "tuned" } else { "base" };
    let label = r.get("label", a.label.clone(), default_label.to_string())?;
    let attack_batch = r.get("attack_batch", a.attack_batch, 0)?;
    let attack = resolve_attack(r, &a.attack)?;
    let mut run = start(take(r), "eval", out)?;
    let split = {
        let p = split_path(&data, kind);
        let s = DatasetSplit::load(&p).with_context(|| format!("loading {}", p.display()))?;
        run.input(&p)?;
        s
    };
    let model = load_checkpoint(&mut run, &checkpoint)?;
    let state = match &state_path {
        None => TunableState::Frozen,
        Some(p) => {
            let s = TunableState::load(p).with_context(|| format!("loading {}", p.display()))?;
            run.input(p)?;
            s
        }
    };
    let view = ModelView::new(&model, &state);
    let opts = EvalOptions {
        attack_batch: (attack_batch > 0).then_some(attack_batch),
        seed,
    };
    let mut reports = evaluate(view, &split, &Condition::Natural, &label, &opts)?.to_vec();
    if let Some(spec) = attack {
        reports.extend(evaluate(view, &split, &Condition::Attacked(spec), &label, &opts)?);
    }
    run.write("reports.csv", reports_csv(&reports))?;
    run.write("summary.csv", mean_table_csv(&reports))?;
    run.finish()
}

fn sweep_setup(r: &mut Resolver, a: &SweepArgs, name: &str, with_rank: bool) -> Result<(PathBuf, PathBuf, PathBuf, AdaptConfig, AttackSpec, Vec<u64>)> {
    let base = AdaptConfig::for_method(Method::AdvLora);
    let out = r.path("out", a.common.out.clone(), name)?;
    if a.common.seed.is_some() {
        return Err(usage("use --seeds to choose adaptation seeds"));
    }
    let (data, epochs, batch_size, lr, clip_norm) = resolve_train(r, &a.train, base.epochs, base.batch_size, base.lr, base.clip_norm)?;
    let (checkpoint, base) = resolve_adapter(r, &a.adapter, base, with_rank)?;
    let attack = resolve_attack(r, &a.attack)?.ok_or_else(|| usage("sweeps train and evaluate adversarially; --attack none is not allowed"))?;
    let seeds = r.get("seeds", a.seeds.clone(), List(vec![1, 2, 3, 4, 5]))?.0;
    let cfg = AdaptConfig {
        epochs,
        batch_size,
        lr,
        clip_norm,
        attack,
        ..base
    };
    cfg.validate()?;
    Ok((out, data, checkpoint, cfg, attack, seeds))
}

fn fixture(run: &mut Run, data: &Path, checkpoint: &Path) -> Result<Fixture> {
    Ok(Fixture {
        dataset: load_dataset(run, data)?,
        base: load_checkpoint(run, checkpoint)?,
        pretrain_log: TrainLog::default(),
    })
}

fn cmd_ablate(r: &mut Resolver, a: SweepArgs) -> Result<PathBuf> {
    let (out, data, checkpoint, cfg, attack, seeds) = sweep_setup(r, &a, "ablate", true)?;
    let mut run = start(take(r), "ablate", out)?;
    let fx = fixture(&mut run, &data, &checkpoint)?;
    let t = Instant::now();
    let rows = ablate(&fx, &cfg, &seeds, &attack)?;
    elapsed("ablate", t);
    run.write("ablation.csv", ablation_csv(&rows))?;
    run.finish()
}

fn cmd_rank_sweep(r: &mut Resolver, a: RankSweepArgs) -> Result<PathBuf> {
    if a.sweep.adapter.rank.is_some() {
        return Err(usage("use --ranks to choose adapter ranks"));
    }
    let (out, data, checkpoint, cfg, attack, seeds) = sweep_setup(r, &a.sweep, "rank-sweep", false)?;
    let ranks = r.get("ranks", a.ranks.clone(), List(SWEEP_RANKS.to_vec()))?.0;
    let mut run = start(take(r), "rank-sweep", out)?;
    let fx = fixture(&mut run, &data, &checkpoint)?;
    let t = Instant::now();
    let rows = rank_sweep(&fx, &cfg, &ranks, &seeds, &attack)?;
    elapsed("rank-sweep", t);
    run.write("rank_sweep.csv", rank_sweep_csv(&rows))?;
    run.finish()
}
