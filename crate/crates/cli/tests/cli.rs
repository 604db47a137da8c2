use std::path::Path;
use std::process::{Command, Output};

const SMALL_DATA: &[&str] = &[
    "--num-classes", "6", "--d-latent", "4", "--d-v", "12", "--d-w", "10",
    "--n-train", "96", "--n-val", "24", "--n-test", "24",
];
const SMALL_MODEL: &[&str] = &["--hidden", "12", "--d-emb", "8", "--epochs", "3"];

fn advlora(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advlora"))
        .env("ADVLORA_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = advlora(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(root: &Path, args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(root, &refs)
}

fn read(root: &Path, rel: &str) -> String {
    std::fs::read_to_string(root.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// gen-data, pretrain, adapt and eval under `root`.
fn recipe(root: &Path) {
    run(root, with(&["gen-data", "--seed", "3"], SMALL_DATA));
    run(root, with(&["pretrain"], SMALL_MODEL));
    ok(root, &["adapt", "--method", "advlora", "--rank", "3", "--epochs", "1", "--seed", "1", "--batch-size", "16"]);
    ok(root, &["eval", "--state", "adapt/state.advt", "--attack", "pgd", "--eps", "2/255", "--steps", "2"]);
}

#[test]
fn full_recipe_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    recipe(a.path());
    recipe(b.path());
    for rel in [
        "data/train.advl",
        "pretrain/model.advc",
        "pretrain/train_log.jsonl",
        "adapt/state.advt",
        "adapt/adapters.adva",
        "adapt/train_log.jsonl",
    ] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    for rel in ["eval/reports.csv", "eval/summary.csv", "adapt/config.txt"] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel}");
    }

    let reports = read(a.path(), "eval/reports.csv");
    let lines: Vec<&str> = reports.lines().collect();
    assert_eq!(lines[0], "method,condition,direction,r1,r5,r10,rmean,seed");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("tuned,natural,v2w,"));
    assert!(lines[3].starts_with("tuned,pgd2,v2w,"));

    let manifest: serde_json::Value = serde_json::from_str(&read(a.path(), "adapt/manifest.json")).unwrap();
    assert_eq!(manifest["command"], "adapt");
    assert_eq!(manifest["config"]["rank"], "3");
    assert_eq!(manifest["config"]["pc"], "true");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);
    assert!(manifest["outputs"]["state.advt"].as_str().unwrap().len() == 64);
}

#[test]
fn config_file_reproduces_a_run_and_flags_win() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    run(r, with(&["gen-data"], SMALL_DATA));
    run(r, with(&["pretrain", "--seed", "4"], SMALL_MODEL));
    let cfg = r.join("pretrain/config.txt");
    let cfg = cfg.to_str().unwrap();
    ok(r, &["pretrain", "--config", cfg, "--out", "again"]);
    assert_eq!(std::fs::read(r.join("pretrain/model.advc")).unwrap(), std::fs::read(r.join("again/model.advc")).unwrap());

    ok(r, &["pretrain", "--config", cfg, "--out", "other", "--seed", "5"]);
    assert!(read(r, "other/config.txt").contains("seed = 5"));
    assert_ne!(std::fs::read(r.join("pretrain/model.advc")).unwrap(), std::fs::read(r.join("other/model.advc")).unwrap());
}

#[test]
fn ablate_emits_the_four_settings() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    run(r, with(&["gen-data"], SMALL_DATA));
    run(r, with(&["pretrain"], SMALL_MODEL));
    ok(r, &["ablate", "--seeds", "1", "--epochs", "1", "--rank", "3", "--batch-size", "16"]);
    let csv = read(r, "ablate/ablation.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "setting,pc,pa,pu,seed,natural_rmean,attacked_rmean");
    let settings: Vec<String> = lines[1..5].iter().map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(settings, ["baseline,0,0,0", "pc,1,0,0", "pc+pa,1,1,0", "pc+pa+pu,1,1,1"]);
    assert_eq!(lines.len(), 9);
    assert!(lines[5..].iter().all(|l| l.split(',').nth(4) == Some("mean")));
}

#[test]
fn rank_sweep_covers_each_rank() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    run(r, with(&["gen-data"], SMALL_DATA));
    run(r, with(&["pretrain"], SMALL_MODEL));
    ok(r, &["rank-sweep", "--ranks", "2,4", "--seeds", "1,2", "--epochs", "1", "--batch-size", "16"]);
    let csv = read(r, "rank-sweep/rank_sweep.csv");
    let ranks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ranks, ["2", "2", "4", "4"]);
}

#[test]
fn usage_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    for args in [
        &["adapt", "--bogus"][..],
        &["frobnicate"],
        &["adapt", "--method", "lora", "--pc"],
        &["adapt", "--method", "nope"],
        &["adapt", "--attack", "none"],
        &["eval", "--attack", "fgsm", "--steps", "3"],
        &["eval", "--split", "holdout"],
        &["rank-sweep", "--rank", "4"],
    ] {
        let out = advlora(r, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    std::fs::write(r.join("bad.cfg"), "mystery = 1\n").unwrap();
    let cfg = r.join("bad.cfg");
    let out = advlora(r, &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let out = advlora(r, &["pretrain"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.advl"));

    run(r, with(&["gen-data"], SMALL_DATA));
    let out = advlora(r, &["eval", "--checkpoint", "nowhere.advc"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(r.join("junk.advc"), b"ADVC garbage").unwrap();
    let out = advlora(r, &["eval", "--checkpoint", "junk.advc"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn every_method_adapts_and_evaluates() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    run(r, with(&["gen-data"], SMALL_DATA));
    run(r, with(&["pretrain"], SMALL_MODEL));
    for method in ["lora", "lp", "fft"] {
        let out_dir = format!("adapt-{method}");
        ok(r, &["adapt", "--method", method, "--epochs", "1", "--out", &out_dir, "--batch-size", "16", "--rank", "2"]);
        assert_eq!(r.join(&out_dir).join("adapters.adva").exists(), method == "lora");
        let state = format!("{out_dir}/state.advt");
        let eval_dir = format!("eval-{method}");
        ok(r, &["eval", "--state", &state, "--attack", "none", "--label", method, "--out", &eval_dir]);
        let csv = read(r, &format!("{eval_dir}/reports.csv"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().skip(1).all(|l| l.starts_with(&format!("{method},natural,"))));
    }
}
