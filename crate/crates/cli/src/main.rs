//! `advlora` command line: data generation, pretraining, adaptation,
//! attacked evaluation, the component ablation and the rank sweep.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{List, Num, UsageError};

#[derive(Debug, Parser)]
#[command(name = "advlora", version, about = "Adversarial low-rank adaptation of a small dual-encoder retrieval model")]
struct Cli {
    /// Root directory for relative input and output paths.
    #[arg(long, global = true, env = "ADVLORA_ROOT", default_value = ".")]
    root: PathBuf,

    /// Flat `key = value` file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test splits of the synthetic paired dataset.
    GenData(GenDataArgs),
    /// Pretrain both towers contrastively and save a frozen checkpoint.
    Pretrain(PretrainArgs),
    /// Adapt a frozen checkpoint with one method.
    Adapt(AdaptArgs),
    /// Retrieval recall of a checkpoint (and optional tuned state), natural and attacked.
    Eval(EvalArgs),
    /// Adversarial AdvLoRA over the four component settings.
    Ablate(SweepArgs),
    /// Adversarial AdvLoRA across adapter ranks.
    RankSweep(RankSweepArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory (relative to the root).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: OutArgs,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    d_latent: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_w: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<Num>,
    #[arg(long)]
    instance_spread: Option<Num>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory holding train.advl, val.advl and test.advl.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<Num>,
    #[arg(long)]
    clip_norm: Option<Num>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: OutArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long)]
    temperature: Option<Num>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    /// none, fgsm, pgd or bim.
    #[arg(long)]
    attack: Option<String>,
    /// ℓ∞ budget; fractions such as 1/255 are accepted.
    #[arg(long)]
    eps: Option<Num>,
    /// Step size of the iterative attacks.
    #[arg(long)]
    xi: Option<Num>,
    #[arg(long)]
    steps: Option<usize>,
    /// Uniform random start inside the budget (pgd only).
    #[arg(long)]
    random_start: bool,
}

#[derive(Debug, Args)]
struct AdapterArgs {
    /// Frozen checkpoint from `pretrain`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    /// Std of the standard LoRA init of A.
    #[arg(long)]
    lora_sigma: Option<Num>,
    /// Initial scale when the adaptive update is on.
    #[arg(long)]
    alpha_init: Option<Num>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: OutArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    adapter: AdapterArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// advlora, lora, lp or fft.
    #[arg(long)]
    method: Option<String>,
    /// Train on attacked batches (default for advlora).
    #[arg(long, overrides_with = "natural")]
    adversarial: bool,
    /// Train on clean batches only (default for the other methods).
    #[arg(long, overrides_with = "adversarial")]
    natural: bool,
    /// Parameter clustering init.
    #[arg(long, overrides_with = "no_pc")]
    pc: bool,
    #[arg(long, overrides_with = "pc")]
    no_pc: bool,
    /// Parameter alignment after init.
    #[arg(long, overrides_with = "no_pa")]
    pa: bool,
    #[arg(long, overrides_with = "pa")]
    no_pa: bool,
    /// Trainable adapter scale.
    #[arg(long, overrides_with = "no_pu")]
    pu: bool,
    #[arg(long, overrides_with = "pu")]
    no_pu: bool,
    /// Also train on the clean batch when adversarial.
    #[arg(long)]
    mix_clean: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: OutArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Tuned state from `adapt` (state.advt); omitted means the bare checkpoint.
    #[arg(long)]
    state: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Method column of the report.
    #[arg(long)]
    label: Option<String>,
    /// Samples attacked jointly; 0 attacks the whole split at once.
    #[arg(long)]
    attack_batch: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: OutArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    adapter: AdapterArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Adaptation seeds, comma-separated.
    #[arg(long)]
    seeds: Option<List<u64>>,
}

#[derive(Debug, Args)]
struct RankSweepArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Ranks, comma-separated.
    #[arg(long)]
    ranks: Option<List<usize>>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(e.downcast_ref::<advlora::Error>(), Some(advlora::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
