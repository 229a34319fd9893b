// SPDX-License-Identifier: Apache-2.0

//! One-dimensional hyperparameter sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::{bail, ensure, Result};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::runner::{run_many, RunRecord, SeedOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    Gamma,
    NPos,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Gamma => "gamma",
            Axis::NPos => "n_pos",
        }
    }

    /// Copy of `cfg` with the swept value set.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            Axis::Alpha => c.assign.alpha = value,
            Axis::Gamma => c.assign.gamma = value,
            Axis::NPos => {
                ensure!(
                    value >= 1.0 && value.fract() == 0.0,
                    "n_pos values must be positive integers, got {value}"
                );
                c.assign.num_positives = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn label(self, value: f64) -> String {
        format!("{}={value}", self.name())
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Axis::Alpha),
            "gamma" => Ok(Axis::Gamma),
            "n_pos" | "num_positives" => Ok(Axis::NPos),
            other => bail!("unknown sweep axis `{other}` (expected alpha, gamma or n_pos)"),
        }
    }
}

/// One run per value, all sharing the config's seeds.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
) -> Result<Vec<(RunRecord, Vec<SeedOutcome>)>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    let jobs: Vec<(String, ExperimentConfig)> = values
        .iter()
        .map(|&v| Ok((axis.label(v), axis.apply(cfg, v)?)))
        .collect::<Result<_>>()?;
    Ok(run_many(&jobs, cfg.workers)?)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per swept value: the value, then AP, AP50 and AP75 means with
/// standard deviations over successful seeds.
pub fn sweep_csv(axis: Axis, values: &[f64], records: &[RunRecord]) -> String {
    let mut out = format!(
        "schema_version,{},seeds_ok,seeds_failed,ap,ap_std,ap50,ap50_std,ap75,ap75_std\n",
        axis.name()
    );
    for (v, r) in values.iter().zip(records) {
        let a = &r.aggregate;
        writeln!(
            out,
            "{SCHEMA_VERSION},{v},{},{},{},{},{},{},{},{}",
            a.seeds_ok,
            a.seeds_failed,
            cell(a.mean_ap.map(|m| m.mean)),
            cell(a.mean_ap.map(|m| m.std)),
            cell(a.ap50.map(|m| m.mean)),
            cell(a.ap50.map(|m| m.std)),
            cell(a.ap75.map(|m| m.mean)),
            cell(a.ap75.map(|m| m.std)),
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_application() {
        let cfg = ExperimentConfig::default();
        assert_eq!("alpha".parse::<Axis>().unwrap(), Axis::Alpha);
        assert!("beta".parse::<Axis>().is_err());
        assert_eq!(
            Axis::NPos.apply(&cfg, 12.0).unwrap().assign.num_positives,
            12
        );
        assert!(Axis::NPos.apply(&cfg, 2.5).is_err());
        assert!(Axis::Alpha.apply(&cfg, 1.5).is_err());
        assert_eq!(Axis::Gamma.apply(&cfg, 1.25).unwrap().assign.gamma, 1.25);
        assert_eq!(Axis::Alpha.label(0.25), "alpha=0.25");
    }
}
