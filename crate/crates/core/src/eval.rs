// SPDX-License-Identifier: Apache-2.0

//! Inference-side evaluation: class-wise greedy NMS, COCO-style average
//! precision with 101-point interpolation, and confidence/IoU statistics of
//! the most confident predictions.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox};
use crate::math;
use crate::synth::GroundTruth;

/// Number of recall sample points on the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;

/// COCO caps detections per image (and category) at 100.
pub const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    #[cfg_attr(feature = "serde", serde(rename = "box"))]
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

/// Recall sample points `0.00, 0.01, ..., 1.00`.
pub fn recall_grid() -> Vec<f64> {
    (0..RECALL_POINTS).map(|i| i as f64 / 100.0).collect()
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Descending confidence, ties by lower index.
fn by_confidence(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_confidence((a, dets[a].confidence), (b, dets[b].confidence)));
    order
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections are visited in descending confidence (lower index first on
/// ties); one is dropped when it overlaps an already kept detection of the
/// same class with IoU strictly above `iou_thresh`. The output is in visiting
/// order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in ranked(dets) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

fn num_classes(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> usize {
    let d = dets
        .iter()
        .flatten()
        .map(|d| d.class + 1)
        .max()
        .unwrap_or(0);
    let g = gts.iter().flatten().map(|g| g.class + 1).max().unwrap_or(0);
    d.max(g)
}

/// Interpolated precision at the 101 recall points for one class, or `None`
/// when the class has no ground truth anywhere.
pub fn class_precision_curve(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    iou_thresh: f64,
    max_det: usize,
) -> Option<Vec<f64>> {
    let npos: usize = gts
        .iter()
        .map(|g| g.iter().filter(|o| o.class == class).count())
        .sum();
    if npos == 0 {
        return None;
    }
    // (confidence, scene, index in scene, is true positive)
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, (sd, sg)) in dets.iter().zip(gts).enumerate() {
        let class_gts: Vec<&BBox> = sg
            .iter()
            .filter(|o| o.class == class)
            .map(|o| &o.bbox)
            .collect();
        let mut matched = alloc::vec![false; class_gts.len()];
        let mut order: Vec<usize> = (0..sd.len()).filter(|&i| sd[i].class == class).collect();
        order.sort_by(|&a, &b| by_confidence((a, sd[a].confidence), (b, sd[b].confidence)));
        order.truncate(max_det);
        for i in order {
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in class_gts.iter().enumerate() {
                if matched[g] {
                    continue;
                }
                let v = iou(&sd[i].bbox, gb);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                matched[g] = true;
            }
            scored.push((sd[i].confidence, s, i, best.is_some()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, _, _, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    // precision envelope, monotone non-increasing in rank
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let curve = recall_grid()
        .into_iter()
        .map(|r| {
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    Some(curve)
}

/// AP and PR samples at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub ap: f64,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Class-averaged interpolated precision at each recall point.
    pub precision: Vec<f64>,
}

pub fn evaluate_threshold(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thresh: f64,
    max_det: usize,
) -> ThresholdResult {
    let k = num_classes(dets, gts);
    let curves: Vec<Option<Vec<f64>>> = (0..k)
        .map(|c| class_precision_curve(dets, gts, c, iou_thresh, max_det))
        .collect();
    let per_class: Vec<Option<f64>> = curves
        .iter()
        .map(|c| {
            c.as_ref()
                .map(|v| v.iter().sum::<f64>() / RECALL_POINTS as f64)
        })
        .collect();
    let present: Vec<&Vec<f64>> = curves.iter().flatten().collect();
    let (ap, precision) = if present.is_empty() {
        // nothing annotated: perfect only if nothing was predicted
        let any = dets.iter().any(|d| !d.is_empty());
        let v = if any { 0.0 } else { 1.0 };
        (v, alloc::vec![v; RECALL_POINTS])
    } else {
        let n = present.len() as f64;
        let ap = per_class.iter().flatten().sum::<f64>() / n;
        let precision = (0..RECALL_POINTS)
            .map(|r| present.iter().map(|c| c[r]).sum::<f64>() / n)
            .collect();
        (ap, precision)
    };
    ThresholdResult {
        iou_threshold: iou_thresh,
        ap,
        per_class,
        precision,
    }
}

/// Mean over present classes of the 101-point interpolated AP.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thresh: f64,
) -> f64 {
    evaluate_threshold(dets, gts, iou_thresh, MAX_DETECTIONS).ap
}

/// Summary of the top fraction of predictions ranked by confidence.
/// Statistics over an empty selection, or a Pearson coefficient with zero
/// variance, are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfIouStats {
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub mean_iou: Option<f64>,
    pub pearson: Option<f64>,
}

/// Sample Pearson correlation; `None` if either side has zero variance or
/// fewer than two points are given.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    // a constant side can leave rounding residue around its mean
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / math::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Statistics over the `top_fraction` most confident `(confidence, iou)`
/// pairs. Ties keep input order.
pub fn top_fraction_stats(pairs: &[(f64, f64)], top_fraction: f64) -> Result<ConfIouStats> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(invalid("top_fraction", "must lie in (0, 1]"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| by_confidence((a, pairs[a].0), (b, pairs[b].0)));
    let take = libm::ceil(top_fraction * pairs.len() as f64) as usize;
    order.truncate(take.min(pairs.len()));
    if order.is_empty() {
        return Ok(ConfIouStats {
            count: 0,
            mean_confidence: None,
            mean_iou: None,
            pearson: None,
        });
    }
    let conf: Vec<f64> = order.iter().map(|&i| pairs[i].0).collect();
    let ious: Vec<f64> = order.iter().map(|&i| pairs[i].1).collect();
    let n = order.len() as f64;
    Ok(ConfIouStats {
        count: order.len(),
        mean_confidence: Some(conf.iter().sum::<f64>() / n),
        mean_iou: Some(ious.iter().sum::<f64>() / n),
        pearson: pearson(&conf, &ious),
    })
}

/// Best IoU of `bbox` against the same-class ground truth of its scene.
pub fn matched_iou(bbox: &BBox, class: usize, gts: &[GroundTruth]) -> f64 {
    gts.iter()
        .filter(|g| g.class == class)
        .map(|g| iou(bbox, &g.bbox))
        .fold(0.0, f64::max)
}

/// `(confidence, matched IoU)` for every detection, scene by scene.
pub fn confidence_iou_pairs(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> Vec<(f64, f64)> {
    dets.iter()
        .zip(gts)
        .flat_map(|(sd, sg)| {
            sd.iter()
                .map(move |d| (d.confidence, matched_iou(&d.bbox, d.class, sg)))
        })
        .collect()
}

pub fn confidence_iou_stats(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    top_fraction: f64,
) -> Result<ConfIouStats> {
    top_fraction_stats(&confidence_iou_pairs(dets, gts), top_fraction)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// AP at each threshold in `iou_thresholds`.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
    pub recall_grid: Vec<f64>,
    /// `precision[t][r]`: class-averaged interpolated precision.
    pub precision: Vec<Vec<f64>>,
    pub top_fraction: f64,
    pub before_nms: ConfIouStats,
    pub after_nms: ConfIouStats,
}

impl EvalReport {
    pub fn ap_at(&self, thresh: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - thresh).abs() < 1e-9)
            .map(|i| self.ap[i])
    }
}

/// AP across the COCO threshold grid plus confidence/IoU statistics.
/// `candidates` are pre-NMS predictions, `dets` the final detections; both are
/// per scene and aligned with `gts`.
pub fn evaluate(
    candidates: &[(f64, f64)],
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    top_fraction: f64,
) -> Result<EvalReport> {
    let iou_thresholds = coco_iou_thresholds();
    let results: Vec<ThresholdResult> = iou_thresholds
        .iter()
        .map(|&t| evaluate_threshold(dets, gts, t, MAX_DETECTIONS))
        .collect();
    let ap: Vec<f64> = results.iter().map(|r| r.ap).collect();
    let mean_ap = ap.iter().sum::<f64>() / ap.len() as f64;
    Ok(EvalReport {
        iou_thresholds,
        mean_ap,
        ap,
        recall_grid: recall_grid(),
        precision: results.into_iter().map(|r| r.precision).collect(),
        top_fraction,
        before_nms: top_fraction_stats(candidates, top_fraction)?,
        after_nms: confidence_iou_stats(dets, gts, top_fraction)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn det(x: f64, conf: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class: 0,
            confidence: conf,
        }
    }

    fn gt(x: f64) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class: 0,
        }
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[det(0.0, 0.4)], 0.5), vec![det(0.0, 0.4)]);
        assert_eq!(
            nms(&[det(0.0, 0.8), det(0.0, 0.9)], 0.5),
            vec![det(0.0, 0.9)]
        );
        // other classes are never suppressed
        let mut other = det(0.0, 0.2);
        other.class = 1;
        assert_eq!(nms(&[det(0.0, 0.8), other], 0.5).len(), 2);
    }

    #[test]
    fn nms_output_is_sorted_and_separated() {
        let dets: Vec<Detection> = (0..20)
            .map(|i| det(i as f64 * 3.0, ((i * 7) % 10) as f64 / 10.0))
            .collect();
        let out = nms(&dets, 0.3);
        for w in out.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.3);
            }
        }
    }

    #[test]
    fn ap_examples() {
        let gts = vec![vec![gt(0.0), gt(30.0)], vec![gt(5.0)]];
        let perfect = vec![vec![det(0.0, 1.0), det(30.0, 1.0)], vec![det(5.0, 1.0)]];
        assert_eq!(average_precision(&perfect, &gts, 0.5), 1.0);
        let none = vec![vec![], vec![]];
        assert_eq!(average_precision(&none, &gts, 0.5), 0.0);
        // no annotations at all
        assert_eq!(average_precision(&none, &[vec![], vec![]], 0.5), 1.0);
    }

    #[test]
    fn ap_half_recall() {
        // one hit, one miss: precision 1 up to recall 0.5
        let gts = vec![vec![gt(0.0), gt(30.0)]];
        let dets = vec![vec![det(0.0, 0.9)]];
        let ap = average_precision(&dets, &gts, 0.5);
        assert!((ap - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn ap_invariant_to_confidence_scaling_and_monotone() {
        let gts = vec![vec![gt(0.0), gt(30.0), gt(60.0)]];
        let dets = vec![vec![
            det(1.0, 0.9),
            det(33.0, 0.3),
            det(90.0, 0.6),
            det(58.0, 0.5),
        ]];
        let scaled: Vec<Vec<Detection>> = dets
            .iter()
            .map(|s| {
                s.iter()
                    .map(|d| Detection {
                        confidence: d.confidence * 0.37,
                        ..*d
                    })
                    .collect()
            })
            .collect();
        for t in coco_iou_thresholds() {
            assert_eq!(
                average_precision(&dets, &gts, t),
                average_precision(&scaled, &gts, t)
            );
        }
        let base = average_precision(&dets, &gts, 0.5);
        let mut better = dets.clone();
        better[0].push(det(60.0, 0.95));
        assert!(average_precision(&better, &gts, 0.5) >= base);
    }

    #[test]
    fn stats_examples() {
        let flat = top_fraction_stats(&[(0.4, 0.1), (0.4, 0.7), (0.4, 0.2)], 1.0).unwrap();
        assert!((flat.mean_confidence.unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(flat.pearson, None);
        let line = top_fraction_stats(&[(0.2, 0.2), (0.8, 0.8)], 1.0).unwrap();
        assert!((line.pearson.unwrap() - 1.0).abs() < 1e-15);
        let empty = top_fraction_stats(&[], 0.02).unwrap();
        assert_eq!(empty.count, 0);
        assert_eq!(empty.mean_iou, None);
        assert!(top_fraction_stats(&[], 0.0).is_err());
    }

    #[test]
    fn top_fraction_keeps_most_confident() {
        let pairs: Vec<(f64, f64)> = (0..100)
            .map(|i| (i as f64 / 100.0, 1.0 - i as f64 / 100.0))
            .collect();
        let s = top_fraction_stats(&pairs, 0.02).unwrap();
        assert_eq!(s.count, 2);
        assert!((s.mean_confidence.unwrap() - 0.985).abs() < 1e-12);
    }
}
