// SPDX-License-Identifier: Apache-2.0

//! Command line front end.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use noisy_anchors_core::anchors;
use noisy_anchors_core::model::Method;

use crate::checks;
use crate::config::ExperimentConfig;
use crate::formats;
use crate::report::{self, file_stem};
use crate::runner::{self, RunRecord, SeedOutcome};
use crate::sweep::{self, Axis};

#[derive(Debug, Parser)]
#[command(
    name = "noisy-anchors",
    version,
    about = "Cleanliness-based label assignment experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; override `seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Concurrent workers; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// baseline, sl, sr or sl+sr; overrides the `[method]` section.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate every seed of one config.
    Run(Common),
    /// Repeat a run over values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, gamma or n_pos.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Summarize the run records in a directory.
    Report {
        /// Directory holding run records.
        dir: PathBuf,
    },
    /// Write the train and eval scenes of each seed as JSON Lines.
    Gen(Common),
    /// Run the randomized oracle and invariant suites.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare hard and top-N assignment on COCO-style annotations.
    Audit {
        #[command(flatten)]
        common: Common,
        /// COCO-style annotation JSON.
        #[arg(long)]
        coco: PathBuf,
    },
}

/// Load the config and apply command-line overrides.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml_str_with_env("", "<defaults>", std::env::vars())?,
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(m) = &common.method {
        cfg.method = Method::from_name(m).with_context(|| format!("unknown method `{m}`"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write a record, its per-seed evaluation files and checkpoints under `dir`.
pub fn persist_run(dir: &Path, record: &RunRecord, outcomes: &[SeedOutcome]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = file_stem(&record.label);
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, record.to_json())?;
    let eval_dir = dir.join("eval");
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&eval_dir)?;
    fs::create_dir_all(&ckpt_dir)?;
    for o in outcomes {
        let seed = o.record.seed;
        if let Some(rep) = &o.record.report {
            fs::write(
                eval_dir.join(format!("{stem}_seed{seed}.json")),
                formats::eval_report_json(rep),
            )?;
            fs::write(
                eval_dir.join(format!("{stem}_seed{seed}.csv")),
                formats::eval_report_csv(rep),
            )?;
        }
        if let Some(params) = &o.params {
            let f = File::create(ckpt_dir.join(format!("{stem}_seed{seed}.nack")))?;
            formats::write_checkpoint(BufWriter::new(f), params, o.record.iterations)?;
        }
    }
    Ok(path)
}

fn print_record(r: &RunRecord) {
    let ap = r.aggregate.mean_ap.map_or("n/a".to_string(), |m| {
        format!("{:.4} +- {:.4}", m.mean, m.std)
    });
    println!(
        "{}: AP {ap} over {} seeds ({} failed), config {}",
        r.label, r.aggregate.seeds_ok, r.aggregate.seeds_failed, r.config_hash
    );
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = resolve_config(&common)?;
            let (record, outcomes) = runner::run(&cfg)?;
            let path = persist_run(&cfg.out_dir, &record, &outcomes)?;
            print_record(&record);
            println!("wrote {}", path.display());
            if record.aggregate.seeds_ok == 0 {
                bail!("every seed failed");
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = resolve_config(&common)?;
            let axis: Axis = axis.parse()?;
            let results = sweep::sweep(&cfg, axis, &values)?;
            let dir = cfg.out_dir.join(format!("sweep_{}", axis.name()));
            for (rec, outs) in &results {
                persist_run(&dir, rec, outs)?;
                print_record(rec);
            }
            let records: Vec<RunRecord> = results.into_iter().map(|(r, _)| r).collect();
            let csv = dir.join(format!("sweep_{}.csv", axis.name()));
            fs::write(&csv, sweep::sweep_csv(axis, &values, &records))?;
            println!("wrote {}", csv.display());
        }
        Command::Report { dir } => {
            let text = report::write_report(&dir)?;
            print!("{text}");
        }
        Command::Gen(common) => {
            let cfg = resolve_config(&common)?;
            let set = anchors::generate(&cfg.anchors)?;
            fs::create_dir_all(&cfg.out_dir)?;
            for &seed in &cfg.seeds {
                let (train, eval) = runner::splits(&cfg, &set, seed)?;
                for (name, scenes) in [("train", &train), ("eval", &eval)] {
                    let path = cfg.out_dir.join(format!("scenes_{name}_seed{seed}.jsonl"));
                    formats::write_scenes(BufWriter::new(File::create(&path)?), scenes)?;
                    println!("wrote {} ({} scenes)", path.display(), scenes.len());
                }
            }
        }
        Command::Check { seed } => {
            let outcomes = checks::run_all(seed);
            let mut failed = 0;
            for o in &outcomes {
                println!(
                    "[{}] {}: {}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    o.detail
                );
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
        Command::Audit { common, coco } => {
            let cfg = resolve_config(&common)?;
            let f = File::open(&coco).with_context(|| format!("opening {}", coco.display()))?;
            let (scenes, _) = formats::read_coco(BufReader::new(f))?;
            let audit = formats::audit_assignment(&scenes, &cfg.anchors, &cfg.assign)?;
            println!("{}", serde_json::to_string_pretty(&audit)?);
        }
    }
    Ok(())
}
