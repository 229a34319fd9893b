// SPDX-License-Identifier: Apache-2.0

//! Experiment runner, file formats and command line for training one-stage
//! detector heads with cleanliness-based soft labels and re-weighting.

pub mod checks;
pub mod cli;
pub mod config;
pub mod formats;
pub mod oracles;
pub mod report;
pub mod runner;
pub mod sweep;

pub use noisy_anchors_core as core;
