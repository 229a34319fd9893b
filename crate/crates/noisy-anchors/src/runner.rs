// SPDX-License-Identifier: Apache-2.0

//! Multi-seed training and evaluation.

use std::time::Instant;

use noisy_anchors_core::anchors::{self, AnchorSet};
use noisy_anchors_core::model::{HeadParams, HeadShape, TrainState};
use noisy_anchors_core::pipeline;
use noisy_anchors_core::synth::{generate_split, Scene};
use noisy_anchors_core::EvalReport;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};

/// Stream of the per-seed minibatch shuffler.
const SHUFFLE_STREAM: u64 = 2;

/// Seed ranges of the two splits never meet: the train split of seed `s`
/// starts at `s << 32`, the eval split half way through the same block.
pub fn train_base_seed(seed: u64) -> u64 {
    seed << 32
}

pub fn eval_base_seed(seed: u64) -> u64 {
    (seed << 32) | (1 << 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub iteration: u64,
    /// Means over the iterations since the previous sample.
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub num_positives: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Iterations completed before the run finished or failed.
    pub iterations: u64,
    pub loss_curve: Vec<LossSample>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 with a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mean_ap: Option<MeanStd>,
    pub ap50: Option<MeanStd>,
    pub ap75: Option<MeanStd>,
}

impl Aggregate {
    pub fn of(seeds: &[SeedRecord]) -> Self {
        let reports: Vec<&EvalReport> = seeds.iter().filter_map(|s| s.report.as_ref()).collect();
        let col = |f: &dyn Fn(&EvalReport) -> f64| {
            MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        Aggregate {
            seeds_ok: reports.len(),
            seeds_failed: seeds.len() - reports.len(),
            mean_ap: col(&|r| r.mean_ap),
            ap50: col(&|r| r.ap_at(0.5).unwrap_or(f64::NAN)),
            ap75: col(&|r| r.ap_at(0.75).unwrap_or(f64::NAN)),
        }
    }
}

/// Wall-clock fields; everything else in a record is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub total_seconds: f64,
    pub seed_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    /// Free-form name of the run; the method name unless overridden.
    pub label: String,
    pub config_hash: String,
    pub method: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedRecord>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("records serialize")
    }

    /// The record without its timing fields, as compact JSON. Two runs of
    /// one config produce identical payloads.
    pub fn payload(&self) -> String {
        let mut v = serde_json::to_value(self).expect("records serialize");
        if let Some(map) = v.as_object_mut() {
            map.remove("timing");
        }
        serde_json::to_string(&v).expect("records serialize")
    }

    pub fn mean_ap(&self) -> Option<f64> {
        self.aggregate.mean_ap.map(|m| m.mean)
    }

    pub fn report(&self, seed: u64) -> Option<&EvalReport> {
        self.seeds
            .iter()
            .find(|s| s.seed == seed)
            .and_then(|s| s.report.as_ref())
    }
}

/// Outcome of training one seed, including the trained head.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub record: SeedRecord,
    pub params: Option<HeadParams>,
    pub seconds: f64,
}

pub fn head_shape(cfg: &ExperimentConfig) -> HeadShape {
    HeadShape {
        feature_dim: cfg.gen.feature_dim(),
        num_classes: cfg.gen.num_classes,
        hidden: cfg.train.hidden,
    }
}

/// Train-and-evaluate splits of one seed.
pub fn splits(
    cfg: &ExperimentConfig,
    anchors: &AnchorSet,
    seed: u64,
) -> noisy_anchors_core::Result<(Vec<Scene>, Vec<Scene>)> {
    let train = generate_split(&cfg.gen, anchors, train_base_seed(seed), cfg.data.num_train)?;
    let eval = generate_split(&cfg.gen, anchors, eval_base_seed(seed), cfg.data.num_eval)?;
    Ok((train, eval))
}

/// Train a head on `train` for the configured budget, sampling the loss curve.
pub fn train(
    cfg: &ExperimentConfig,
    anchors: &AnchorSet,
    train: &[Scene],
    seed: u64,
    curve: &mut Vec<LossSample>,
) -> noisy_anchors_core::Result<TrainState> {
    let params = HeadParams::init(
        head_shape(cfg),
        cfg.train.prior_prob,
        cfg.train.init_std,
        seed,
    )?;
    let mut state = TrainState::new(params, cfg.train.lr.clone());
    state.momentum = cfg.train.momentum;
    state.weight_decay = cfg.train.weight_decay;
    let loss_cfg = cfg.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = cfg.train.batch_size.min(train.len());
    let mut cursor = order.len();
    let (mut cls, mut reg, mut npos, mut window) = (0.0, 0.0, 0.0, 0u64);
    for it in 0..cfg.train.iterations {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&Scene> = order[cursor..cursor + bs]
            .iter()
            .map(|&i| &train[i])
            .collect();
        cursor += bs;
        let step = state.train_step(anchors, &batch, &loss_cfg)?;
        cls += step.cls_loss;
        reg += step.reg_loss;
        npos += step.num_positives as f64 / bs as f64;
        window += 1;
        let done = it + 1;
        if done % cfg.train.loss_every == 0 || done == cfg.train.iterations {
            let w = window as f64;
            curve.push(LossSample {
                iteration: done,
                cls_loss: cls / w,
                reg_loss: reg / w,
                num_positives: npos / w,
            });
            (cls, reg, npos, window) = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok(state)
}

/// Train and evaluate one seed. Failures are recorded, not propagated.
pub fn run_seed(cfg: &ExperimentConfig, anchors: &AnchorSet, seed: u64) -> SeedOutcome {
    let start = Instant::now();
    let mut curve = Vec::new();
    let result = splits(cfg, anchors, seed).and_then(|(tr, ev)| {
        let state = train(cfg, anchors, &tr, seed, &mut curve)?;
        let report = pipeline::evaluate(&state.params, anchors, &ev, &cfg.inference)?;
        Ok((state, report))
    });
    let iterations = curve.last().map_or(0, |s| s.iteration);
    let (record, params) = match result {
        Ok((state, report)) => (
            SeedRecord {
                seed,
                ok: true,
                error: None,
                iterations: state.iteration,
                loss_curve: curve,
                report: Some(report),
            },
            Some(state.params),
        ),
        Err(e) => (
            SeedRecord {
                seed,
                ok: false,
                error: Some(e.to_string()),
                iterations,
                loss_curve: curve,
                report: None,
            },
            None,
        ),
    };
    SeedOutcome {
        record,
        params,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
}

fn assemble(
    cfg: &ExperimentConfig,
    label: &str,
    outcomes: &[SeedOutcome],
    total: f64,
) -> RunRecord {
    let seeds: Vec<SeedRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    RunRecord {
        schema_version: SCHEMA_VERSION,
        label: label.to_string(),
        config_hash: cfg.hash(),
        method: cfg.method.name().to_string(),
        config: cfg.clone(),
        aggregate: Aggregate::of(&seeds),
        seeds,
        timing: Timing {
            total_seconds: total,
            seed_seconds: outcomes.iter().map(|o| o.seconds).collect(),
        },
    }
}

/// Run several configs, parallel over every (config, seed) pair with at most
/// `workers` threads. Results come back in input order.
pub fn run_many(
    jobs: &[(String, ExperimentConfig)],
    workers: usize,
) -> Result<Vec<(RunRecord, Vec<SeedOutcome>)>, noisy_anchors_core::Error> {
    let start = Instant::now();
    let anchor_sets: Vec<AnchorSet> = jobs
        .iter()
        .map(|(_, c)| anchors::generate(&c.anchors))
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(usize, u64)> = jobs
        .iter()
        .enumerate()
        .flat_map(|(j, (_, c))| c.seeds.iter().map(move |&s| (j, s)))
        .collect();
    let outcomes: Vec<(usize, SeedOutcome)> = pool(workers).install(|| {
        pairs
            .par_iter()
            .map(|&(j, s)| (j, run_seed(&jobs[j].1, &anchor_sets[j], s)))
            .collect()
    });
    let total = start.elapsed().as_secs_f64();
    let mut grouped: Vec<Vec<SeedOutcome>> = vec![Vec::new(); jobs.len()];
    for (j, o) in outcomes {
        grouped[j].push(o);
    }
    Ok(jobs
        .iter()
        .zip(grouped)
        .map(|((label, cfg), outs)| (assemble(cfg, label, &outs, total), outs))
        .collect())
}

/// Run every seed of one config.
pub fn run(
    cfg: &ExperimentConfig,
) -> Result<(RunRecord, Vec<SeedOutcome>), noisy_anchors_core::Error> {
    let label = cfg.method.name().to_string();
    let mut out = run_many(&[(label, cfg.clone())], cfg.workers)?;
    Ok(out.remove(0))
}
