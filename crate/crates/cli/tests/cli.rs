use std::path::Path;
use std::process::{Command, Output};

use dmf_core::bench::{read_points_csv, read_reports};
use dmf_core::trainer::load_checkpoint;

fn dmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmf")).args(args).output().expect("spawn dmf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, depth: usize) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "dataset": {{ "kind": "gmm-ring" }},
  "net": {{ "width": 16, "depth": {depth}, "time_embed_dim": 8 }},
  "train": {{
    "warmup": {{ "steps": 12, "batch_size": 16, "lr": 0.001 }},
    "finetune": {{ "steps": 6, "batch_size": 16, "lr": 0.001, "phi": {{ "fourier_dim": 4, "hidden": 8 }} }}
  }},
  "eval": {{ "samples": 200, "projections": 16 }},
  "seed": 3,
  "output_dir": "{}"
}}"#,
        dir.join("run").display()
    );
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dmf(&[])), 1);
    assert_eq!(code(&dmf(&["nope"])), 1);
    assert_eq!(code(&dmf(&["sample"])), 1);
    assert_eq!(code(&dmf(&["sample", "--ckpt", "x", "--kind", "leapfrog"])), 1);
    assert_eq!(code(&dmf(&["--help"])), 0);
}

#[test]
fn schema_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "learning_rate": 3}"#).unwrap();
    assert_eq!(code(&dmf(&["train-flow", "--config", s(&bad)])), 2);
    std::fs::write(&bad, r#"{"guidance": {"omega": 1.5}}"#).unwrap();
    assert_eq!(code(&dmf(&["train-flow", "--config", s(&bad)])), 2);
    std::fs::write(&bad, r#"{"net": {"width": 16, "heads": 2}}"#).unwrap();
    assert_eq!(code(&dmf(&["train-flow", "--config", s(&bad)])), 2);
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&dmf(&["sample", "--ckpt", s(&missing)])), 3);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&dmf(&["eval", "--ckpt", s(&junk)])), 3);
}

#[test]
fn oracle_check_is_green() {
    let o = dmf(&["oracle-check"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().count() >= 8);
    assert!(out.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn proposal_dump_writes_densities() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.csv");
    let o = dmf(&["proposal-dump", "--mu1", "-0.4", "--mu2", "-0.4", "--points", "10", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("z,f_max,f_min"));
    assert_eq!(lines.count(), 10);
}

#[test]
fn pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let run = dir.path().join("run");
    let flow = run.join("flow.ckpt");
    let dmf_ckpt = run.join("dmf.ckpt");

    assert_eq!(code(&dmf(&["train-flow", "--config", s(&cfg)])), 0);
    let first = std::fs::read(&flow).unwrap();
    assert_eq!(code(&dmf(&["train-flow", "--config", s(&cfg)])), 0);
    assert_eq!(std::fs::read(&flow).unwrap(), first);
    assert!(run.join("train-flow.config.json").exists());
    assert!(run.join("train-flow.log.jsonl").exists());

    let o = dmf(&["finetune-dmf", "--config", s(&cfg), "--init", s(&flow), "--depth", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let st = load_checkpoint(&dmf_ckpt).unwrap();
    assert_eq!(st.net.split, 2);
    assert_eq!(st.step, 6);

    let o = dmf(&["sample", "--config", s(&cfg), "--ckpt", s(&dmf_ckpt), "--kind", "map-euler", "--steps", "1"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("NFE=1"));
    let (pts, labels) = read_points_csv(&run.join("samples.csv")).unwrap();
    assert_eq!(pts.shape(), &[200, 2]);
    assert!(labels.iter().all(|l| l.is_some_and(|c| c < 8)));
    let csv = std::fs::read(run.join("samples.csv")).unwrap();
    assert_eq!(code(&dmf(&["sample", "--config", s(&cfg), "--ckpt", s(&dmf_ckpt)])), 0);
    assert_eq!(std::fs::read(run.join("samples.csv")).unwrap(), csv);

    let o = dmf(&[
        "eval",
        "--config",
        s(&cfg),
        "--ckpt",
        s(&flow),
        "--kind",
        "flow-heun",
        "--steps",
        "4",
        "--name",
        "heun",
    ]);
    assert_eq!(code(&o), 0);
    let reports = read_reports(&run.join("report.heun.jsonl")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].nfe, 7);
    assert!(reports[0].coverage.is_some());
    assert_eq!(
        code(&dmf(&[
            "eval",
            "--config",
            s(&cfg),
            "--ckpt",
            s(&flow),
            "--kind",
            "flow-heun",
            "--steps",
            "4",
            "--name",
            "heun"
        ])),
        0
    );
    let again = read_reports(&run.join("report.heun.jsonl")).unwrap();
    assert_eq!(again.len(), 1);
    assert_eq!(again[0].without_timing(), reports[0].without_timing());

    assert_eq!(code(&dmf(&["sample", "--config", s(&cfg), "--ckpt", s(&flow), "--kind", "map-euler"])), 3);
}

#[test]
fn flags_override_config_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let run = dir.path().join("run");
    assert_eq!(code(&dmf(&["train-flow", "--config", s(&cfg), "--steps", "4", "--seed", "9"])), 0);
    let st = load_checkpoint(&run.join("flow.ckpt")).unwrap();
    assert_eq!((st.step, st.train.seed), (4, 9));
    let eff: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("train-flow.config.json")).unwrap()).unwrap();
    assert_eq!(eff["config"]["seed"], 9);
    assert_eq!(eff["config"]["train"]["warmup"]["steps"], 4);
    assert_eq!(eff["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn finetune_depth_flag_sets_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 20);
    let run = dir.path().join("run");
    assert_eq!(code(&dmf(&["train-flow", "--config", s(&cfg), "--steps", "1"])), 0);
    let flow = run.join("flow.ckpt");
    let o = dmf(&["finetune-dmf", "--config", s(&cfg), "--init", s(&flow), "--depth", "18", "--steps", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_checkpoint(&run.join("dmf.ckpt")).unwrap().net.split, 18);
    assert_eq!(code(&dmf(&["finetune-dmf", "--config", s(&cfg), "--init", s(&flow), "--depth", "20"])), 1);

    let o = dmf(&[
        "finetune-dmf",
        "--config",
        s(&cfg),
        "--init",
        s(&flow),
        "--decoder-only",
        "--depth",
        "12",
        "--steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let st = load_checkpoint(&run.join("dmf-decoder.ckpt")).unwrap();
    assert_eq!(st.net.split, 12);
}

#[test]
fn shipped_recipe_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/gmm8.json");
    let cfg = dmf_cli::RunConfig::load(&path).unwrap();
    assert_eq!(cfg.train.warmup.steps, 20_000);
    assert_eq!(cfg.train.finetune.steps, 10_000);
    assert_eq!(cfg.guidance.omega, 0.6);
    assert_eq!(cfg.guidance.interval, (0.0, 0.7));
    assert_eq!(cfg.finetune_config(false).proposal.mu_mf, (0.4, -1.2));
    assert_eq!(cfg.net_config(dmf_core::net::Arch::DecoupledMap).split, 4);
    assert_eq!(cfg.warmup_config().guidance.omega, 0.0);
}
