// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration files.
//!
//! Configs are TOML. Every section is optional and falls back to the
//! defaults below; unknown keys are rejected. After the file is parsed,
//! environment variables of the form `NA_<SECTION>__<KEY>` (or `NA_<KEY>`
//! for top-level keys) override single values, e.g.
//! `NA_ASSIGN__ALPHA=0.5` or `NA_SEEDS=[1,2]`. Values are read as TOML
//! literals and fall back to plain strings.
//!
//! ```toml
//! schema_version = 1
//! seeds = [0, 1, 2, 3, 4]
//! out_dir = "runs/default"
//!
//! [method]
//! soft_labels = true
//! reweighting = true
//!
//! [assign]
//! alpha = 0.75
//! gamma = 1.0
//! num_positives = 30
//!
//! [train]
//! iterations = 1500
//! batch_size = 8
//! ```

use std::path::{Path, PathBuf};

use noisy_anchors_core::anchors::AnchorConfig;
use noisy_anchors_core::model::{LossConfig, LrSchedule, Method};
use noisy_anchors_core::pipeline::InferenceParams;
use noisy_anchors_core::{AssignParams, FocalParams, GenConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Version stamped into every config and output file.
pub const SCHEMA_VERSION: u32 = 1;

/// Prefix of environment overrides.
pub const ENV_PREFIX: &str = "NA_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("environment override {var}: {message}")]
    Override { var: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_train: usize,
    pub num_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_eval: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Smooth-L1 transition point.
    pub beta: f64,
    /// Width of the tanh hidden layer; 0 trains a linear head.
    pub hidden: usize,
    pub prior_prob: f64,
    pub init_std: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Loss curve sampling period in iterations.
    pub loss_every: u64,
    pub lr: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 8,
            beta: 1.0 / 9.0,
            hidden: 0,
            prior_prob: 0.01,
            init_std: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss_every: 50,
            lr: LrSchedule {
                base: 0.05,
                milestones: vec![1000, 1300],
                factor: 0.1,
                warmup: 50,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    /// Seeds trained concurrently; 0 means one per available core.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub method: Method,
    pub anchors: AnchorConfig,
    pub assign: AssignParams,
    pub focal: FocalParams,
    pub gen: GenConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub inference: InferenceParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: vec![0, 1, 2, 3, 4],
            workers: 1,
            out_dir: PathBuf::from("runs/default"),
            method: Method::FULL,
            anchors: AnchorConfig::default(),
            assign: AssignParams::default(),
            focal: FocalParams::default(),
            gen: GenConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceParams::default(),
        }
    }
}

/// Fields that change how a run is executed but not what it computes.
#[derive(Serialize)]
struct Hashed<'a> {
    schema_version: u32,
    seeds: &'a [u64],
    method: &'a Method,
    anchors: &'a AnchorConfig,
    assign: &'a AssignParams,
    focal: &'a FocalParams,
    gen: &'a GenConfig,
    data: &'a DataConfig,
    train: &'a TrainConfig,
    inference: &'a InferenceParams,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, apply `NA_*` overrides from `vars`, validate.
    pub fn from_toml_str_with_env<I>(text: &str, origin: &str, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        // parse once without overrides so file errors keep their line numbers
        let _: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        vars.sort();
        for (var, value) in &vars {
            apply_override(&mut table, var, value)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Override {
                var: vars
                    .iter()
                    .map(|(k, _)| k.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str_with_env(&text, &path.display().to_string(), std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if let Some(s) = self.seeds.iter().find(|&&s| s > u64::from(u32::MAX)) {
            return bad(format!("seed {s} exceeds 2^32 - 1"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.data.num_train == 0 || self.data.num_eval == 0 {
            return bad("data.num_train and data.num_eval must be positive".into());
        }
        if self.data.num_train as u64 >= 1 << 31 || self.data.num_eval as u64 >= 1 << 31 {
            return bad("data split sizes must stay below 2^31".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if t.loss_every == 0 {
            return bad("train.loss_every must be positive".into());
        }
        if !(t.beta.is_finite() && t.beta > 0.0) {
            return bad("train.beta must be positive".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("train.momentum must lie in [0, 1)".into());
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad("train.weight_decay must be finite and >= 0".into());
        }
        if !(t.lr.base > 0.0) {
            return bad("train.lr.base must be positive".into());
        }
        let core =
            |r: noisy_anchors_core::Result<()>| r.map_err(|e| ConfigError::Invalid(e.to_string()));
        core(self.anchors.validate())?;
        core(self.assign.validate())?;
        core(self.focal.validate())?;
        core(self.gen.validate())?;
        core(self.train.lr.validate())?;
        core(self.inference.validate())?;
        if !(t.prior_prob > 0.0 && t.prior_prob < 1.0) {
            return bad("train.prior_prob must lie in (0, 1)".into());
        }
        if !(t.init_std.is_finite() && t.init_std >= 0.0) {
            return bad("train.init_std must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of the canonical TOML of every field that affects results
    /// (`workers` and `out_dir` are excluded).
    pub fn hash(&self) -> String {
        let h = Hashed {
            schema_version: self.schema_version,
            seeds: &self.seeds,
            method: &self.method,
            anchors: &self.anchors,
            assign: &self.assign,
            focal: &self.focal,
            gen: &self.gen,
            data: &self.data,
            train: &self.train,
            inference: &self.inference,
        };
        let text = toml::to_string(&h).expect("config serializes to TOML");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            method: self.method,
            assign: self.assign,
            focal: self.focal,
            beta: self.train.beta,
        }
    }
}

fn override_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<(), ConfigError> {
    let key = &var[ENV_PREFIX.len()..];
    let path: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override {
            var: var.to_string(),
            message: "empty key segment".into(),
        });
    }
    let (last, parents) = path
        .split_last()
        .expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override {
            var: var.to_string(),
            message: format!("`{p}` is not a section"),
        })?;
    }
    cur.insert(last.clone(), override_value(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, "mem").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_toml_str("", "mem").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err =
            ExperimentConfig::from_toml_str("[assign]\nalpah = 0.5\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpah"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(ExperimentConfig::from_toml_str("seeds = []\n", "mem").is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let vars = vec![
            ("NA_ASSIGN__ALPHA".to_string(), "0.5".to_string()),
            ("NA_SEEDS".to_string(), "[7, 8]".to_string()),
            ("NA_METHOD__SOFT_LABELS".to_string(), "false".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_str_with_env("", "mem", vars).unwrap();
        assert_eq!(cfg.assign.alpha, 0.5);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert!(!cfg.method.soft_labels);
        let bad = vec![("NA_ASSIGN__NOPE".to_string(), "1".to_string())];
        assert!(ExperimentConfig::from_toml_str_with_env("", "mem", bad).is_err());
    }

    #[test]
    fn hash_ignores_execution_fields() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.workers = 4;
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.assign.alpha = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
