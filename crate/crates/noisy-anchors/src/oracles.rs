// SPDX-License-Identifier: Apache-2.0

//! Slow, independent reference implementations used to cross-check the core
//! crate. None of these call the function they check.

use noisy_anchors_core::anchors::AnchorSet;
use noisy_anchors_core::assignment::HardAssignment;
use noisy_anchors_core::geometry::iou;
use noisy_anchors_core::losses::{AnchorTarget, Role, PROB_EPS};
use noisy_anchors_core::model::{build_targets, forward, scene_objective, HeadParams, LossConfig};
use noisy_anchors_core::{BBox, BoxDelta, Detection, FocalParams, GroundTruth, HardLabel, Scene};

/// Denominator floor of [`rel_err`]; gradients below it are compared
/// absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_beyond(analytic, numeric, 0.0)
}

/// [`rel_err`] after discounting `noise`, a bound on the rounding error of
/// `numeric`. Differences inside the bound are not resolvable by the step.
pub fn rel_err_beyond(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Exhaustive NMS: build the full pairwise suppression relation, then
/// resolve survivors in rank order.
pub fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let n = dets.len();
    // precedes[i][j]: i is visited before j
    let precedes = |i: usize, j: usize| {
        dets[i].confidence > dets[j].confidence
            || (dets[i].confidence == dets[j].confidence && i < j)
    };
    let rank: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| precedes(j, i)).count())
        .collect();
    let mut by_rank = vec![0; n];
    for (i, &r) in rank.iter().enumerate() {
        by_rank[r] = i;
    }
    let overlaps: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    dets[i].class == dets[j].class && iou(&dets[i].bbox, &dets[j].bbox) > thresh
                })
                .collect()
        })
        .collect();
    let mut alive = vec![false; n];
    for &i in &by_rank {
        alive[i] = !(0..n).any(|j| alive[j] && overlaps[j][i]);
    }
    by_rank
        .into_iter()
        .filter(|&i| alive[i])
        .map(|i| dets[i])
        .collect()
}

fn greedy_hits(dets: &[&Detection], gts: &[&BBox], thresh: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut hits = 0;
    for d in dets {
        let mut pick: Option<usize> = None;
        for g in 0..gts.len() {
            if used[g] {
                continue;
            }
            let v = iou(&d.bbox, gts[g]);
            if v < thresh {
                continue;
            }
            match pick {
                Some(p) if iou(&d.bbox, gts[p]) >= v => {}
                _ => pick = Some(g),
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            hits += 1;
        }
    }
    hits
}

/// AP by re-running the greedy matcher from scratch on every prefix of the
/// ranked detection list and reading interpolated precision off the raw
/// (precision, recall) points.
pub fn ap_reference(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    thresh: f64,
    max_det: usize,
) -> f64 {
    let classes = dets
        .iter()
        .flatten()
        .map(|d| d.class + 1)
        .chain(gts.iter().flatten().map(|g| g.class + 1))
        .max()
        .unwrap_or(0);
    let mut aps = Vec::new();
    for c in 0..classes {
        let npos: usize = gts
            .iter()
            .map(|s| s.iter().filter(|g| g.class == c).count())
            .sum();
        if npos == 0 {
            continue;
        }
        // (scene, index) of each kept detection, globally ranked
        let mut pool: Vec<(usize, usize)> = Vec::new();
        for (s, sd) in dets.iter().enumerate() {
            let mut mine: Vec<usize> = (0..sd.len()).filter(|&i| sd[i].class == c).collect();
            mine.sort_by(|&a, &b| {
                sd[b]
                    .confidence
                    .partial_cmp(&sd[a].confidence)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            mine.truncate(max_det);
            pool.extend(mine.into_iter().map(|i| (s, i)));
        }
        pool.sort_by(|a, b| {
            let (ca, cb) = (dets[a.0][a.1].confidence, dets[b.0][b.1].confidence);
            cb.partial_cmp(&ca)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let mut points = Vec::new();
        for k in 1..=pool.len() {
            let prefix = &pool[..k];
            let mut tp = 0;
            for (s, sg) in gts.iter().enumerate() {
                let sd: Vec<&Detection> = prefix
                    .iter()
                    .filter(|p| p.0 == s)
                    .map(|p| &dets[p.0][p.1])
                    .collect();
                let boxes: Vec<&BBox> = sg
                    .iter()
                    .filter(|g| g.class == c)
                    .map(|g| &g.bbox)
                    .collect();
                tp += greedy_hits(&sd, &boxes, thresh);
            }
            points.push((tp as f64 / k as f64, tp as f64 / npos as f64));
        }
        let mut sum = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            sum += points
                .iter()
                .filter(|(_, rec)| *rec >= r)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max);
        }
        aps.push(sum / 101.0);
    }
    if aps.is_empty() {
        return if dets.iter().all(|d| d.is_empty()) {
            1.0
        } else {
            0.0
        };
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Pearson r as the mean product of z-scores (sample standard deviations).
pub fn pearson_reference(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let sd = |v: &[f64], m: f64| {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let (sx, sy) = (sd(xs, mx), sd(ys, my));
    if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
        return None;
    }
    let s: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| ((x - mx) / sx) * ((y - my) / sy))
        .sum();
    Some(s / (n - 1) as f64)
}

/// Mean confidence, mean IoU and Pearson r of the `ceil(frac * n)` most
/// confident pairs (stable on ties).
pub fn top_fraction_reference(
    pairs: &[(f64, f64)],
    frac: f64,
) -> (usize, Option<f64>, Option<f64>, Option<f64>) {
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let take = ((frac * pairs.len() as f64).ceil() as usize).min(pairs.len());
    let top = &sorted[..take];
    if top.is_empty() {
        return (0, None, None, None);
    }
    let c: Vec<f64> = top.iter().map(|p| p.0).collect();
    let v: Vec<f64> = top.iter().map(|p| p.1).collect();
    let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    (take, Some(m(&c)), Some(m(&v)), pearson_reference(&c, &v))
}

fn clamp(p: f64) -> f64 {
    p.max(PROB_EPS).min(1.0 - PROB_EPS)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Focal modulating weights of every (anchor, class) output, evaluated once
/// so finite differences can hold them fixed.
pub fn frozen_focal_weights(probs: &[f64], fp: &FocalParams) -> Vec<(f64, f64)> {
    probs
        .iter()
        .map(|&p| {
            let p = clamp(p);
            (
                fp.alpha * (1.0 - p).powf(fp.gamma),
                (1.0 - fp.alpha) * p.powf(fp.gamma),
            )
        })
        .collect()
}

fn normalizer(targets: &[AnchorTarget]) -> f64 {
    (targets.iter().filter(|t| t.role == Role::Positive).count() as f64).max(1.0)
}

/// Per-output classification terms with frozen focal weights, before
/// normalization. Ignored anchors contribute zeros.
pub fn cls_terms_frozen(
    probs: &[f64],
    k: usize,
    targets: &[AnchorTarget],
    weights: &[(f64, f64)],
) -> Vec<f64> {
    let mut terms = vec![0.0; probs.len()];
    for (a, t) in targets.iter().enumerate() {
        if t.role == Role::Ignored {
            continue;
        }
        for c in 0..k {
            let i = a * k + c;
            let p = clamp(probs[i]);
            let (w_p, w_n) = weights[i];
            let is_target = t.role == Role::Positive && t.class == Some(c);
            let (label, r) = if is_target {
                (t.label, t.weight)
            } else {
                (0.0, 1.0)
            };
            terms[i] = r * (-label * w_p * p.ln() - (1.0 - label) * w_n * (1.0 - p).ln());
        }
    }
    terms
}

/// Classification loss written out term by term with frozen focal weights.
pub fn cls_loss_frozen(
    probs: &[f64],
    k: usize,
    targets: &[AnchorTarget],
    weights: &[(f64, f64)],
) -> f64 {
    cls_terms_frozen(probs, k, targets, weights)
        .iter()
        .sum::<f64>()
        / normalizer(targets)
}

/// Per-anchor weighted smooth-L1 terms, before normalization.
pub fn reg_terms_reference(
    pred: &[BoxDelta],
    target: &[BoxDelta],
    targets: &[AnchorTarget],
    beta: f64,
) -> Vec<f64> {
    let sl1 = |x: f64| {
        if x.abs() < beta {
            0.5 * x * x / beta
        } else {
            x.abs() - 0.5 * beta
        }
    };
    targets
        .iter()
        .enumerate()
        .map(|(a, t)| {
            if t.role != Role::Positive {
                return 0.0;
            }
            let (p, g) = (pred[a].to_array(), target[a].to_array());
            t.weight * (0..4).map(|j| sl1(p[j] - g[j])).sum::<f64>()
        })
        .collect()
}

pub fn reg_loss_reference(
    pred: &[BoxDelta],
    target: &[BoxDelta],
    targets: &[AnchorTarget],
    beta: f64,
) -> f64 {
    reg_terms_reference(pred, target, targets, beta)
        .iter()
        .sum::<f64>()
        / normalizer(targets)
}

/// Normalized central difference of a sum of terms. Differencing term by
/// term keeps the unchanged terms from swamping small derivatives with
/// roundoff. Also returns a bound on the rounding error of the estimate:
/// one ulp for each evaluation of a term that moved plus recursive
/// summation. Terms that did not move cancel exactly.
fn central(up: &[f64], down: &[f64], norm: f64, h: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut evals = 0.0;
    let mut moved = 0.0;
    for (u, d) in up.iter().zip(down) {
        if u != d {
            sum += u - d;
            evals += u.abs().max(d.abs());
            moved += 1.0;
        }
    }
    let scale = 2.0 * h * norm;
    let noise = f64::EPSILON * (evals + moved * sum.abs()) / scale;
    (sum / scale, noise)
}

/// Hard-label focal loss straight from the IoU assignment: the target of an
/// output is 1 iff its anchor is a positive of that class; ignored anchors
/// are skipped.
pub fn focal_baseline_reference(
    probs: &[f64],
    k: usize,
    hard: &HardAssignment,
    gt_classes: &[usize],
    fp: &FocalParams,
) -> f64 {
    let mut total = 0.0;
    let mut npos = 0usize;
    for (a, label) in hard.labels.iter().enumerate() {
        if *label == HardLabel::Ignored {
            continue;
        }
        let matched_class = match label {
            HardLabel::Foreground => {
                npos += 1;
                hard.matched[a].map(|g| gt_classes[g])
            }
            _ => None,
        };
        for c in 0..k {
            let p = clamp(probs[a * k + c]);
            let t = if matched_class == Some(c) { 1.0 } else { 0.0 };
            total += -t * fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln()
                - (1.0 - t) * (1.0 - fp.alpha) * p.powf(fp.gamma) * (1.0 - p).ln();
        }
    }
    total / (npos as f64).max(1.0)
}

/// Worst relative error of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    fn push(&mut self, analytic: f64, (numeric, noise): (f64, f64)) {
        self.checked += 1;
        self.max_rel_err = self
            .max_rel_err
            .max(rel_err_beyond(analytic, numeric, noise));
    }

    pub fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            checked: self.checked + other.checked,
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
        }
    }
}

impl Default for GradReport {
    fn default() -> Self {
        GradReport {
            checked: 0,
            max_rel_err: 0.0,
        }
    }
}

/// Central differences of the frozen-weight classification loss against
/// its analytic logit gradient.
pub fn check_logit_grad(
    logits: &[f64],
    k: usize,
    targets: &[AnchorTarget],
    fp: &FocalParams,
    analytic: &[f64],
    h: f64,
) -> GradReport {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let w = frozen_focal_weights(&probs, fp);
    let norm = normalizer(targets);
    let mut rep = GradReport::default();
    let mut p = probs.clone();
    for i in 0..logits.len() {
        p[i] = sigmoid(logits[i] + h);
        let up = cls_terms_frozen(&p, k, targets, &w);
        p[i] = sigmoid(logits[i] - h);
        let down = cls_terms_frozen(&p, k, targets, &w);
        p[i] = probs[i];
        rep.push(analytic[i], central(&up, &down, norm, h));
    }
    rep
}

pub fn check_delta_grad(
    pred: &[BoxDelta],
    target: &[BoxDelta],
    targets: &[AnchorTarget],
    beta: f64,
    analytic: &[BoxDelta],
    h: f64,
) -> GradReport {
    let norm = normalizer(targets);
    let mut rep = GradReport::default();
    let mut p = pred.to_vec();
    for a in 0..p.len() {
        let orig = p[a].to_array();
        for j in 0..4 {
            let mut terms_at = |d: f64| {
                let mut v = orig;
                v[j] += d;
                p[a] = BoxDelta::from_array(v);
                reg_terms_reference(&p, target, targets, beta)
            };
            let (up, down) = (terms_at(h), terms_at(-h));
            rep.push(analytic[a].to_array()[j], central(&up, &down, norm, h));
        }
        p[a] = BoxDelta::from_array(orig);
    }
    rep
}

/// Gradient of the total scene loss w.r.t. every head parameter against
/// central differences, with targets, soft labels, weights and focal
/// modulation frozen at `params`.
pub fn check_param_grad(
    params: &HeadParams,
    anchors: &AnchorSet,
    scene: &Scene,
    cfg: &LossConfig,
    h: f64,
) -> noisy_anchors_core::Result<GradReport> {
    let out = forward(params, &scene.features)?;
    let targets = build_targets(anchors, scene, &out, cfg)?;
    let (_, analytic) = scene_objective(params, scene, &out, &targets, cfg)?;
    let w = frozen_focal_weights(&out.probs, &cfg.focal);
    let k = out.num_classes;
    let norm = normalizer(&targets.targets);
    let terms_at = |p: &HeadParams| -> noisy_anchors_core::Result<Vec<f64>> {
        let o = forward(p, &scene.features)?;
        let mut t = cls_terms_frozen(&o.probs, k, &targets.targets, &w);
        t.extend(reg_terms_reference(
            &o.deltas,
            &targets.target_deltas,
            &targets.targets,
            cfg.beta,
        ));
        Ok(t)
    };
    let mut rep = GradReport::default();
    let mut p = params.clone();
    for i in 0..p.values.len() {
        let orig = p.values[i];
        p.values[i] = orig + h;
        let up = terms_at(&p)?;
        p.values[i] = orig - h;
        let down = terms_at(&p)?;
        p.values[i] = orig;
        rep.push(analytic[i], central(&up, &down, norm, h));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisy_anchors_core::eval::{nms, pearson};

    fn det(x: f64, conf: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class: 0,
            confidence: conf,
        }
    }

    #[test]
    fn nms_reference_agrees_on_a_chain() {
        // 0 suppresses 1, so 2 survives even though it overlaps 1
        let dets = [det(0.0, 0.9), det(4.0, 0.8), det(8.0, 0.7)];
        assert_eq!(nms_reference(&dets, 0.3), nms(&dets, 0.3));
        assert_eq!(nms_reference(&dets, 0.3).len(), 2);
    }

    #[test]
    fn ap_reference_half_recall() {
        let gts = vec![vec![
            GroundTruth {
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
                class: 0,
            },
            GroundTruth {
                bbox: BBox::new(30.0, 0.0, 40.0, 10.0),
                class: 0,
            },
        ]];
        let ap = ap_reference(&[vec![det(0.0, 0.9)]], &gts, 0.5, 100);
        assert!((ap - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_reference_matches_textbook() {
        let xs = [1.0, 2.0, 3.0, 5.0];
        let ys = [2.0, 1.0, 4.0, 3.0];
        let a = pearson_reference(&xs, &ys).unwrap();
        let b = pearson(&xs, &ys).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert_eq!(pearson_reference(&[1.0, 1.0], &[0.0, 1.0]), None);
    }
}
