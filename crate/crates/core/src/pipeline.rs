// SPDX-License-Identifier: Apache-2.0

//! Inference with a trained head: decode every anchor, filter, NMS, evaluate.

use alloc::vec::Vec;

use crate::anchors::AnchorSet;
use crate::error::{check_len, invalid, Result};
use crate::eval::{self, matched_iou, Detection, EvalReport};
use crate::geometry::decode;
use crate::model::{forward, HeadParams};
use crate::synth::{GroundTruth, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct InferenceParams {
    pub score_threshold: f64,
    /// Candidates kept per scene before NMS.
    pub pre_nms_top_k: usize,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// Fraction of most confident predictions summarised before/after NMS.
    pub top_fraction: f64,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            pre_nms_top_k: 1000,
            nms_threshold: 0.5,
            max_detections: eval::MAX_DETECTIONS,
            top_fraction: 0.02,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(invalid("score_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(invalid("nms_threshold", "must lie in [0, 1]"));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(invalid("top_fraction", "must lie in (0, 1]"));
        }
        if self.max_detections == 0 || self.pre_nms_top_k == 0 {
            return Err(invalid("max_detections", "detection caps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetections {
    /// `(confidence, matched IoU)` of every anchor/class prediction.
    pub candidates: Vec<(f64, f64)>,
    /// Detections after thresholding, NMS and the per-scene cap.
    pub detections: Vec<Detection>,
}

/// Run the head on one scene.
pub fn detect(
    params: &HeadParams,
    anchors: &AnchorSet,
    scene: &Scene,
    inference: &InferenceParams,
) -> Result<SceneDetections> {
    let out = forward(params, &scene.features)?;
    check_len("head outputs", anchors.len(), out.len())?;
    let k = out.num_classes;
    let gts: &[GroundTruth] = scene.objects();
    let mut candidates = Vec::with_capacity(out.probs.len());
    let mut kept = Vec::new();
    for (a, anchor) in anchors.boxes.iter().enumerate() {
        let bbox = decode(anchor, &out.deltas[a])?;
        for c in 0..k {
            let p = out.prob(a, c);
            candidates.push((p, matched_iou(&bbox, c, gts)));
            if p >= inference.score_threshold {
                kept.push(Detection {
                    bbox,
                    class: c,
                    confidence: p,
                });
            }
        }
    }
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    kept.truncate(inference.pre_nms_top_k);
    let mut detections = eval::nms(&kept, inference.nms_threshold);
    detections.truncate(inference.max_detections);
    Ok(SceneDetections {
        candidates,
        detections,
    })
}

/// Detect on every scene and compute the evaluation report.
pub fn evaluate(
    params: &HeadParams,
    anchors: &AnchorSet,
    scenes: &[Scene],
    inference: &InferenceParams,
) -> Result<EvalReport> {
    inference.validate()?;
    let mut candidates = Vec::new();
    let mut dets = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let sd = detect(params, anchors, scene, inference)?;
        candidates.extend(sd.candidates);
        dets.push(sd.detections);
        gts.push(scene.objects().to_vec());
    }
    eval::evaluate(&candidates, &dets, &gts, inference.top_fraction)
}
