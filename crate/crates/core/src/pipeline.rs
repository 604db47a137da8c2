//! End-to-end experiment helpers: fixture construction, single-method runs,
//! the component ablation and the rank sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::dataset::{generate, Dataset, GeneratorParams};
use crate::encoder::DualEncoder;
use crate::error::Result;
use crate::eval::{evaluate, mean_rmean, Condition, EvalOptions, RetrievalReport};
use crate::model::{ModelView, TunableState};
use crate::trainer::{adversarial_adapt, natural_adapt, pretrain, AdaptConfig, AdaptOutcome, Method, PretrainConfig, Toggles, TrainLog};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub data: GeneratorParams,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

/// Dataset plus the frozen pretrained backbone every method adapts.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: Dataset,
    pub base: DualEncoder,
    pub pretrain_log: TrainLog,
}

pub fn build_fixture(config: &FixtureConfig) -> Result<Fixture> {
    let dataset = generate(&config.data, config.seed)?;
    let pretrain_cfg = PretrainConfig {
        seed: config.seed,
        ..config.pretrain.clone()
    };
    let (base, pretrain_log) = pretrain(&dataset.train, Some(&dataset.val), &pretrain_cfg)?;
    Ok(Fixture {
        dataset,
        base,
        pretrain_log,
    })
}

/// Natural and attacked test-split reports of one tuned state.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub natural: [RetrievalReport; 2],
    pub attacked: [RetrievalReport; 2],
}

impl Scores {
    pub fn natural_rmean(&self) -> f64 {
        mean_rmean(&self.natural)
    }

    pub fn attacked_rmean(&self) -> f64 {
        mean_rmean(&self.attacked)
    }

    pub fn all(&self) -> Vec<RetrievalReport> {
        self.natural.iter().chain(&self.attacked).cloned().collect()
    }
}

pub fn score(fixture: &Fixture, state: &TunableState, label: &str, attack: &AttackSpec, seed: u64) -> Result<Scores> {
    let view = ModelView::new(&fixture.base, state);
    let opts = EvalOptions {
        attack_batch: None,
        seed,
    };
    Ok(Scores {
        natural: evaluate(view, &fixture.dataset.test, &Condition::Natural, label, &opts)?,
        attacked: evaluate(view, &fixture.dataset.test, &Condition::Attacked(*attack), label, &opts)?,
    })
}

/// `advlora*`, `lora`, ... with an asterisk for adversarial adaptation.
pub fn run_label(config: &AdaptConfig) -> String {
    let mut s = config.method.name().to_string();
    if config.adversarial {
        s.push('*');
    }
    s
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    pub outcome: AdaptOutcome,
    pub scores: Scores,
}

/// Adapts on the train split (validating on val) and scores on test under `eval_attack`.
pub fn run_method(fixture: &Fixture, config: &AdaptConfig, eval_attack: &AttackSpec) -> Result<MethodRun> {
    let ds = &fixture.dataset;
    let outcome = if config.adversarial {
        adversarial_adapt(&fixture.base, &ds.train, Some(&ds.val), config)?
    } else {
        natural_adapt(&fixture.base, &ds.train, Some(&ds.val), config)?
    };
    let label = run_label(config);
    let scores = score(fixture, &outcome.state, &label, eval_attack, config.seed)?;
    Ok(MethodRun {
        label,
        outcome,
        scores,
    })
}

/// The four ablation settings, in table order.
pub const ABLATION_SETTINGS: [Toggles; 4] = [
    Toggles::OFF,
    Toggles {
        pc: true,
        pa: false,
        pu: false,
    },
    Toggles {
        pc: true,
        pa: true,
        pu: false,
    },
    Toggles::ALL,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub seed: u64,
    pub natural_rmean: f64,
    pub attacked_rmean: f64,
}

/// Adversarial AdvLoRA runs for every ablation setting and seed.
pub fn ablate(fixture: &Fixture, base: &AdaptConfig, seeds: &[u64], eval_attack: &AttackSpec) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &toggles in &ABLATION_SETTINGS {
        for &seed in seeds {
            let cfg = AdaptConfig {
                method: Method::AdvLora,
                adversarial: true,
                toggles,
                seed,
                ..base.clone()
            };
            let run = run_method(fixture, &cfg, eval_attack)?;
            rows.push(AblationRow {
                toggles,
                seed,
                natural_rmean: run.scores.natural_rmean(),
                attacked_rmean: run.scores.attacked_rmean(),
            });
        }
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "1"
    } else {
        "0"
    }
}

/// Per-seed rows followed by one `mean` row per setting.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,pc,pa,pu,seed,natural_rmean,attacked_rmean\n");
    for r in rows {
        let t = r.toggles;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            t.label(),
            mark(t.pc),
            mark(t.pa),
            mark(t.pu),
            r.seed,
            r.natural_rmean,
            r.attacked_rmean
        );
    }
    for (t, nat, att) in ablation_means(rows) {
        let _ = writeln!(
            s,
            "{},{},{},{},mean,{nat:.6},{att:.6}",
            t.label(),
            mark(t.pc),
            mark(t.pa),
            mark(t.pu)
        );
    }
    s
}

/// `(setting, mean natural, mean attacked)` in table order.
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(Toggles, f64, f64)> {
    ABLATION_SETTINGS
        .iter()
        .filter_map(|&t| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.toggles == t).collect();
            if sel.is_empty() {
                return None;
            }
            let n = sel.len() as f64;
            Some((
                t,
                sel.iter().map(|r| r.natural_rmean).sum::<f64>() / n,
                sel.iter().map(|r| r.attacked_rmean).sum::<f64>() / n,
            ))
        })
        .collect()
}

pub const SWEEP_RANKS: [usize; 6] = [2, 4, 8, 10, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub seed: u64,
    pub natural_rmean: f64,
    pub attacked_rmean: f64,
}

pub fn rank_sweep(
    fixture: &Fixture,
    base: &AdaptConfig,
    ranks: &[usize],
    seeds: &[u64],
    eval_attack: &AttackSpec,
) -> Result<Vec<RankRow>> {
    let mut rows = Vec::new();
    for &rank in ranks {
        for &seed in seeds {
            let cfg = AdaptConfig {
                rank,
                seed,
                ..base.clone()
            };
            let run = run_method(fixture, &cfg, eval_attack)?;
            rows.push(RankRow {
                rank,
                seed,
                natural_rmean: run.scores.natural_rmean(),
                attacked_rmean: run.scores.attacked_rmean(),
            });
        }
    }
    Ok(rows)
}

pub fn rank_sweep_csv(rows: &[RankRow]) -> String {
    let mut s = String::from("rank,seed,natural_rmean,attacked_rmean\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", r.rank, r.seed, r.natural_rmean, r.attacked_rmean);
    }
    s
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
