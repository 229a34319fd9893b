// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File};

use clap::Parser;
use noisy_anchors::cli::{execute, Cli};
use noisy_anchors::config::ExperimentConfig;
use noisy_anchors::formats::read_checkpoint;
use noisy_anchors::report::load_records;
use noisy_anchors::runner::{run, RunRecord};
use noisy_anchors::sweep::{sweep, Axis};

const TINY: &str = r#"
seeds = [0, 1]

[data]
num_train = 16
num_eval = 8

[train]
iterations = 30
batch_size = 4
loss_every = 10

[train.lr]
base = 0.05
milestones = [20]
warmup = 5
"#;

fn cli(args: &[&str]) -> anyhow::Result<()> {
    execute(Cli::try_parse_from(
        std::iter::once("noisy-anchors").chain(args.iter().copied()),
    )?)
}

fn seeds_json(r: &RunRecord) -> String {
    serde_json::to_string(&r.seeds).unwrap()
}

#[test]
fn run_then_report_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("out");
    let (cfg, out_s) = (cfg_path.to_str().unwrap(), out.to_str().unwrap());
    cli(&[
        "run", "--config", cfg, "--out", out_s, "--method", "baseline",
    ])
    .unwrap();
    cli(&["run", "--config", cfg, "--out", out_s]).unwrap();
    cli(&["report", out_s]).unwrap();

    let records = load_records(&out).unwrap();
    assert_eq!(records.len(), 2);
    let count = |name: &str| fs::read_to_string(out.join(name)).unwrap().lines().count();
    assert_eq!(count("comparison.csv"), 3);
    assert_eq!(count("confidence_iou.csv"), 3);
    // 10 thresholds x 101 recall points, plus the header
    assert_eq!(count("pr_baseline.csv"), 1011);
    assert_eq!(count("pr_sl+sr.csv"), 1011);
    assert!(out.join("summary.txt").exists());
    assert_eq!(count("eval/baseline_seed1.csv"), 11);

    let rec = &records
        .iter()
        .find(|(_, r)| r.label == "baseline")
        .unwrap()
        .1;
    let (params, iteration) =
        read_checkpoint(File::open(out.join("checkpoints/baseline_seed0.nack")).unwrap()).unwrap();
    assert_eq!(iteration, 30);
    assert_eq!(params.shape.feature_dim, rec.config.gen.feature_dim());
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(cli(&["run", "--method", "nope", "--out", d]).is_err());
    assert!(cli(&["report", d])
        .unwrap_err()
        .to_string()
        .contains("no run records"));
    assert!(cli(&["sweep", "--axis", "beta", "--values", "1", "--out", d]).is_err());
    assert!(cli(&["run", "--config", "/does/not/exist.toml"]).is_err());
    assert!(Cli::try_parse_from(["noisy-anchors", "launch"]).is_err());
}

#[test]
fn single_value_sweep_equals_plain_run() {
    let cfg = ExperimentConfig::from_toml_str(TINY, "tiny").unwrap();
    let (plain, _) = run(&cfg).unwrap();
    let swept = sweep(&cfg, Axis::Alpha, &[cfg.assign.alpha]).unwrap();
    assert_eq!(swept.len(), 1);
    assert_eq!(seeds_json(&swept[0].0), seeds_json(&plain));
    assert_eq!(swept[0].0.config_hash, plain.config_hash);
}

#[test]
fn gen_writes_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("scenes");
    cli(&[
        "gen",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "3",
    ])
    .unwrap();
    let lines = |n: &str| fs::read_to_string(out.join(n)).unwrap().lines().count();
    assert_eq!(lines("scenes_train_seed3.jsonl"), 16);
    assert_eq!(lines("scenes_eval_seed3.jsonl"), 8);
}
