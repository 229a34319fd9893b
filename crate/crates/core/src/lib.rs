// SPDX-License-Identifier: Apache-2.0

//! Training-side machinery for anchor-based one-stage detectors that learn
//! from noisy anchor labels.
//!
//! Anchors are scored by a *cleanliness* value that mixes the localization
//! accuracy of the regressed box with the classification confidence of the
//! matched class. The score is used twice: as a soft target for the
//! classification loss and, through a `1 / (1 - x)` transform, as a per-sample
//! weight for both the classification and regression losses.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! its inputs; IO, configuration and the command line live in the companion
//! `noisy-anchors` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod anchors;
pub mod assignment;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
mod math;
pub use math::sigmoid;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use anchors::{AnchorConfig, AnchorLevel, AnchorSet};
pub use assignment::{AssignParams, CleanlinessAssignment, HardAssignment, HardLabel};
pub use error::{Error, Result};
pub use eval::{Detection, EvalReport};
pub use geometry::{BBox, BoxDelta};
pub use losses::{AnchorTarget, FocalParams, LossReport, Role};
pub use model::{HeadParams, HeadShape, TrainState};
pub use synth::{GenConfig, GroundTruth, Scene};
