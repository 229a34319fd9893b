// SPDX-License-Identifier: Apache-2.0

//! Per-anchor supervision.
//!
//! Two strategies are provided:
//!
//! * [`assign_hard`]: the classic IoU-threshold split into foreground,
//!   background and an ignored band in between.
//! * [`assign_clean`]: top-N anchors per ground truth become positives and
//!   receive a soft label (the cleanliness score) and a re-weighting factor,
//!   both derived from the network's current outputs. Everything else is a
//!   negative with label 0 and weight 1.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Result};
use crate::geometry::{decode, iou, iou_matrix, BBox, BoxDelta, IouMatrix};
use crate::losses::{AnchorTarget, Role};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AssignParams {
    /// Weight of localization accuracy against classification confidence.
    pub alpha: f64,
    /// Exponent on the re-weighting factor; 0 disables re-weighting.
    pub gamma: f64,
    /// Positives kept per ground truth.
    pub num_positives: usize,
    pub fg_threshold: f64,
    pub bg_threshold: f64,
    /// Inputs of `1 / (1 - x)` are clamped to `[0, 1 - clamp_eps]`.
    pub clamp_eps: f64,
    /// When positive, top-N anchors with IoU below this value are dropped
    /// from the positive set. 0 disables the filter.
    pub min_pos_iou: f64,
}

impl Default for AssignParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 1.0,
            num_positives: 30,
            fg_threshold: 0.5,
            bg_threshold: 0.4,
            clamp_eps: 1e-4,
            min_pos_iou: 0.0,
        }
    }
}

impl AssignParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) {
            return Err(invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(invalid("gamma", "must be finite and >= 0"));
        }
        if self.num_positives == 0 {
            return Err(invalid("num_positives", "must be at least 1"));
        }
        if !unit(self.fg_threshold) || !unit(self.bg_threshold) {
            return Err(invalid("fg_threshold", "thresholds must lie in [0, 1]"));
        }
        if self.bg_threshold > self.fg_threshold {
            return Err(invalid("bg_threshold", "must not exceed fg_threshold"));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1.0) {
            return Err(invalid("clamp_eps", "must lie in (0, 1)"));
        }
        if !unit(self.min_pos_iou) {
            return Err(invalid("min_pos_iou", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardLabel {
    Foreground,
    Background,
    Ignored,
}

impl HardLabel {
    /// The `{1, 0, -1}` encoding.
    pub fn as_i8(self) -> i8 {
        match self {
            HardLabel::Foreground => 1,
            HardLabel::Background => 0,
            HardLabel::Ignored => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardAssignment {
    pub labels: Vec<HardLabel>,
    /// Argmax-IoU ground truth, set for foreground anchors only.
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl HardAssignment {
    pub fn num_positives(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l == HardLabel::Foreground)
            .count()
    }

    /// Binary loss targets: label 1 for foreground, 0 for background, ignored
    /// anchors excluded. All weights are 1.
    pub fn targets(&self, gt_classes: &[usize]) -> Vec<AnchorTarget> {
        self.labels
            .iter()
            .zip(&self.matched)
            .map(|(label, m)| match (label, m) {
                (HardLabel::Foreground, Some(g)) => {
                    AnchorTarget::positive(*g, gt_classes[*g], 1.0, 1.0)
                }
                (HardLabel::Ignored, _) => AnchorTarget::ignored(),
                _ => AnchorTarget::negative(),
            })
            .collect()
    }
}

/// Threshold assignment on the max IoU of each anchor.
pub fn assign_hard(anchors: &[BBox], gts: &[BBox], params: &AssignParams) -> HardAssignment {
    assign_hard_with(&iou_matrix(anchors, gts), params)
}

pub fn assign_hard_with(ious: &IouMatrix, params: &AssignParams) -> HardAssignment {
    let n = ious.rows();
    let mut labels = Vec::with_capacity(n);
    let mut matched = Vec::with_capacity(n);
    let mut max_iou = Vec::with_capacity(n);
    for i in 0..n {
        let (label, m, best) = match ious.row_argmax(i) {
            None => (HardLabel::Background, None, 0.0),
            Some((j, v)) if v >= params.fg_threshold => (HardLabel::Foreground, Some(j), v),
            Some((_, v)) if v < params.bg_threshold => (HardLabel::Background, None, v),
            Some((_, v)) => (HardLabel::Ignored, None, v),
        };
        labels.push(label);
        matched.push(m);
        max_iou.push(best);
    }
    HardAssignment {
        labels,
        matched,
        max_iou,
    }
}

/// Top-`n` anchors per ground truth by pre-refinement IoU.
///
/// An anchor that lands in the top-`n` of several ground truths goes to the
/// one it overlaps most (lowest index on ties). Returns anchor index to
/// ground-truth index.
pub fn select_positives(anchors: &[BBox], gts: &[BBox], n: usize) -> BTreeMap<usize, usize> {
    select_positives_with(&iou_matrix(anchors, gts), n, 0.0)
}

/// [`select_positives`] over a precomputed IoU matrix. A positive `min_iou`
/// skips candidates with lower IoU.
pub fn select_positives_with(ious: &IouMatrix, n: usize, min_iou: f64) -> BTreeMap<usize, usize> {
    let mut chosen: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::with_capacity(ious.rows());
    for g in 0..ious.cols() {
        // descending IoU, ascending anchor index on ties
        let rank =
            |a: &usize, b: &usize| ious.get(*b, g).total_cmp(&ious.get(*a, g)).then(a.cmp(b));
        order.clear();
        order.extend(0..ious.rows());
        let take = n.min(order.len());
        if take < order.len() {
            order.select_nth_unstable_by(take, rank);
        }
        order.truncate(take);
        order.sort_unstable_by(rank);
        for &a in &order {
            let v = ious.get(a, g);
            if min_iou > 0.0 && v < min_iou {
                continue;
            }
            match chosen.get(&a) {
                Some(&(_, prev)) if prev >= v => {}
                _ => {
                    chosen.insert(a, (g, v));
                }
            }
        }
    }
    chosen.into_iter().map(|(a, (g, _))| (a, g)).collect()
}

/// Cleanliness score: `alpha * loc_a + (1 - alpha) * cls_c`.
#[inline]
pub fn cleanliness(loc_a: f64, cls_c: f64, alpha: f64) -> f64 {
    alpha * loc_a + (1.0 - alpha) * cls_c
}

#[inline]
fn amplify(x: f64, eps: f64) -> f64 {
    1.0 / (1.0 - x.clamp(0.0, 1.0 - eps))
}

/// Raw re-weighting factor `(alpha * f(loc_a) + (1 - alpha) * f(cls_c))^gamma`
/// with `f(x) = 1 / (1 - x)`, before normalization.
pub fn raw_weight(loc_a: f64, cls_c: f64, alpha: f64, gamma: f64, eps: f64) -> f64 {
    math::powf(
        alpha * amplify(loc_a, eps) + (1.0 - alpha) * amplify(cls_c, eps),
        gamma,
    )
}

/// Rescale in place so the values average to exactly one (up to rounding).
pub fn normalize_mean_one(values: &mut [f64]) {
    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        for v in values.iter_mut() {
            *v = *v * n / total;
        }
    }
}

/// Re-weighting factors for one image's positives, normalized to mean one.
pub fn reweight(
    loc_a: &[f64],
    cls_c: &[f64],
    alpha: f64,
    gamma: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    check_len("cls_c", loc_a.len(), cls_c.len())?;
    let mut r: Vec<f64> = loc_a
        .iter()
        .zip(cls_c)
        .map(|(&l, &c)| raw_weight(l, c, alpha, gamma, eps))
        .collect();
    normalize_mean_one(&mut r);
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CleanRole {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanEntry {
    pub role: CleanRole,
    pub gt: Option<usize>,
    /// Soft label `c`.
    pub soft_label: f64,
    /// Re-weighting factor `r`.
    pub weight: f64,
    pub loc_a: Option<f64>,
    pub cls_c: Option<f64>,
}

impl CleanEntry {
    const NEGATIVE: CleanEntry = CleanEntry {
        role: CleanRole::Negative,
        gt: None,
        soft_label: 0.0,
        weight: 1.0,
        loc_a: None,
        cls_c: None,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanlinessAssignment {
    pub entries: Vec<CleanEntry>,
}

impl CleanlinessAssignment {
    pub fn num_positives(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == CleanRole::Positive)
            .count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, &CleanEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.role == CleanRole::Positive)
    }

    /// Loss targets. With `soft_labels` off, positives get label 1; with
    /// `reweighting` off, every weight is 1.
    pub fn targets(
        &self,
        gt_classes: &[usize],
        soft_labels: bool,
        reweighting: bool,
    ) -> Vec<AnchorTarget> {
        self.entries
            .iter()
            .map(|e| match (e.role, e.gt) {
                (CleanRole::Positive, Some(g)) => AnchorTarget::positive(
                    g,
                    gt_classes[g],
                    if soft_labels { e.soft_label } else { 1.0 },
                    if reweighting { e.weight } else { 1.0 },
                ),
                _ => AnchorTarget::negative(),
            })
            .collect()
    }
}

/// Localization accuracy and classification confidence of one anchor
/// against a ground-truth box.
pub fn anchor_quality(
    anchor: &BBox,
    delta: &BoxDelta,
    gt: &BBox,
    cls_conf: f64,
) -> Result<(f64, f64)> {
    let refined = decode(anchor, delta)?;
    Ok((iou(&refined, gt), cls_conf))
}

/// Cleanliness-based assignment for one image.
///
/// `cls_conf(anchor, gt)` returns the predicted probability of `gt`'s class at
/// `anchor`. Soft labels and weights are plain numbers: callers treat them as
/// constants of the current iteration.
pub fn assign_clean<F>(
    anchors: &[BBox],
    gts: &[BBox],
    deltas: &[BoxDelta],
    params: &AssignParams,
    cls_conf: F,
) -> Result<CleanlinessAssignment>
where
    F: Fn(usize, usize) -> f64,
{
    assign_clean_with(
        anchors,
        &iou_matrix(anchors, gts),
        gts,
        deltas,
        params,
        cls_conf,
    )
}

pub fn assign_clean_with<F>(
    anchors: &[BBox],
    ious: &IouMatrix,
    gts: &[BBox],
    deltas: &[BoxDelta],
    params: &AssignParams,
    cls_conf: F,
) -> Result<CleanlinessAssignment>
where
    F: Fn(usize, usize) -> f64,
{
    check_len("predicted deltas", anchors.len(), deltas.len())?;
    check_len("iou matrix rows", anchors.len(), ious.rows())?;
    check_len("iou matrix cols", gts.len(), ious.cols())?;
    let positives = select_positives_with(ious, params.num_positives, params.min_pos_iou);
    let mut entries = alloc::vec![CleanEntry::NEGATIVE; anchors.len()];
    let mut locs = Vec::with_capacity(positives.len());
    let mut confs = Vec::with_capacity(positives.len());
    for (&a, &g) in &positives {
        let (loc_a, cls_c) = anchor_quality(&anchors[a], &deltas[a], &gts[g], cls_conf(a, g))?;
        locs.push(loc_a);
        confs.push(cls_c);
        entries[a] = CleanEntry {
            role: CleanRole::Positive,
            gt: Some(g),
            soft_label: cleanliness(loc_a, cls_c, params.alpha),
            weight: 1.0,
            loc_a: Some(loc_a),
            cls_c: Some(cls_c),
        };
    }
    let weights = reweight(&locs, &confs, params.alpha, params.gamma, params.clamp_eps)?;
    for ((&a, _), w) in positives.iter().zip(weights) {
        entries[a].weight = w;
    }
    Ok(CleanlinessAssignment { entries })
}

/// Re-weighting factors for the foreground anchors of a hard assignment,
/// computed from the same localization/classification qualities as
/// [`assign_clean`]. Non-foreground entries are 1.
pub fn hard_reweight<F>(
    anchors: &[BBox],
    gts: &[BBox],
    hard: &HardAssignment,
    deltas: &[BoxDelta],
    params: &AssignParams,
    cls_conf: F,
) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> f64,
{
    check_len("predicted deltas", anchors.len(), deltas.len())?;
    check_len("hard labels", anchors.len(), hard.labels.len())?;
    let mut idx = Vec::new();
    let mut locs = Vec::new();
    let mut confs = Vec::new();
    for (a, m) in hard.matched.iter().enumerate() {
        if let Some(g) = *m {
            let (l, c) = anchor_quality(&anchors[a], &deltas[a], &gts[g], cls_conf(a, g))?;
            idx.push(a);
            locs.push(l);
            confs.push(c);
        }
    }
    let r = reweight(&locs, &confs, params.alpha, params.gamma, params.clamp_eps)?;
    let mut out = alloc::vec![1.0; anchors.len()];
    for (a, w) in idx.into_iter().zip(r) {
        out[a] = w;
    }
    Ok(out)
}

/// Replace positive weights of `targets` with `weights`.
pub fn apply_weights(targets: &mut [AnchorTarget], weights: &[f64]) {
    for (t, &w) in targets.iter_mut().zip(weights) {
        if t.role == Role::Positive {
            t.weight = w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    /// Anchors on a line with chosen IoU against a single unit GT.
    fn with_ious(values: &[f64]) -> (Vec<BBox>, BBox) {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // a 10x10 box shifted by s along x has IoU (10-s)/(10+s)
        let anchors = values
            .iter()
            .map(|&v| {
                let s = 10.0 * (1.0 - v) / (1.0 + v);
                BBox::new(s, 0.0, s + 10.0, 10.0)
            })
            .collect();
        (anchors, gt)
    }

    #[test]
    fn hard_threshold_cases() {
        let p = AssignParams::default();
        let (anchors, gt) = with_ious(&[0.6, 0.45, 0.2]);
        let h = assign_hard(&anchors, &[gt], &p);
        assert_eq!(
            h.labels,
            vec![
                HardLabel::Foreground,
                HardLabel::Ignored,
                HardLabel::Background
            ]
        );
        assert_eq!(h.matched, vec![Some(0), None, None]);
        let labels: Vec<i8> = h.labels.iter().map(|l| l.as_i8()).collect();
        assert_eq!(labels, vec![1, -1, 0]);

        let h = assign_hard(&anchors, &[], &p);
        assert!(h.labels.iter().all(|&l| l == HardLabel::Background));
    }

    #[test]
    fn hard_match_ties_go_to_lowest_gt() {
        let p = AssignParams::default();
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let h = assign_hard(&[b], &[b, b], &p);
        assert_eq!(h.matched, vec![Some(0)]);
    }

    #[test]
    fn top_n_selection() {
        let (anchors, gt) = with_ious(&[0.9, 0.8, 0.1]);
        let pos = select_positives(&anchors, &[gt], 2);
        assert_eq!(pos.into_iter().collect::<Vec<_>>(), vec![(0, 0), (1, 0)]);
        assert!(select_positives(&anchors, &[], 2).is_empty());
        // fewer anchors than N
        assert_eq!(select_positives(&anchors, &[gt], 10).len(), 3);
    }

    #[test]
    fn shared_anchor_goes_to_higher_iou_gt() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 0.7 with the first GT and 0.9 with the second
        let s7 = 10.0 * 0.3 / 1.7;
        let s9 = 10.0 * 0.1 / 1.9;
        let gts = [
            BBox::new(s7, 0.0, s7 + 10.0, 10.0),
            BBox::new(0.0, s9, 10.0, s9 + 10.0),
        ];
        let pos = select_positives(&[anchor], &gts, 1);
        assert_eq!(pos.get(&0), Some(&1));
    }

    #[test]
    fn cleanliness_examples() {
        assert!((cleanliness(0.8, 0.4, 0.75) - 0.7).abs() < 1e-15);
        for x in [0.0, 0.3, 0.999] {
            assert_eq!(cleanliness(x, 0.123, 1.0), x);
        }
    }

    #[test]
    fn reweight_examples() {
        let r = reweight(&[0.1, 0.5, 0.9], &[0.2, 0.4, 0.99], 0.5, 0.0, 1e-4).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
        let r = reweight(&[0.37], &[0.81], 0.75, 1.0, 1e-4).unwrap();
        assert_eq!(r, vec![1.0]);
        assert!(reweight(&[], &[], 0.75, 1.0, 1e-4).unwrap().is_empty());

        let mut raw = vec![2.0, 4.0];
        normalize_mean_one(&mut raw);
        assert!((raw[0] - 2.0 / 3.0).abs() < 1e-15 && (raw[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reweight_stays_finite_at_one() {
        let r = reweight(&[1.0, 0.2], &[1.0, 0.1], 0.75, 1.5, 1e-4).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn clean_assignment_examples() {
        let p = AssignParams {
            alpha: 0.5,
            gamma: 1.0,
            num_positives: 1,
            ..AssignParams::default()
        };
        // IoU 0.5 anchor, zero deltas: loc_a = 0.5
        let (anchors, gt) = with_ious(&[0.5, 0.1]);
        let deltas = vec![BoxDelta::ZERO; 2];
        let a = assign_clean(&anchors, &[gt], &deltas, &p, |_, _| 0.5).unwrap();
        let e = a.entries[0];
        assert_eq!(e.role, CleanRole::Positive);
        assert!((e.loc_a.unwrap() - 0.5).abs() < 1e-12);
        assert!((e.soft_label - 0.5).abs() < 1e-12);
        assert_eq!(e.weight, 1.0);
        assert_eq!(a.entries[1], CleanEntry::NEGATIVE);

        let a = assign_clean(&anchors, &[], &deltas, &p, |_, _| 0.5).unwrap();
        assert!(a.entries.iter().all(|e| *e == CleanEntry::NEGATIVE));

        assert!(assign_clean(&anchors, &[gt], &deltas[..1], &p, |_, _| 0.5).is_err());
    }

    #[test]
    fn min_pos_iou_drops_non_overlapping() {
        let (mut anchors, gt) = with_ious(&[0.8]);
        anchors.push(BBox::new(50.0, 50.0, 60.0, 60.0));
        let ious = iou_matrix(&anchors, &[gt]);
        assert_eq!(select_positives_with(&ious, 2, 0.0).len(), 2);
        assert_eq!(select_positives_with(&ious, 2, 1e-9).len(), 1);
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<BBox>, Vec<BBox>)> {
        let b = (0.0..60.0f64, 0.0..60.0f64, 3.0..30.0f64, 3.0..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h));
        (
            prop::collection::vec(b.clone(), 1..40),
            prop::collection::vec(b, 0..4),
        )
    }

    proptest! {
        #[test]
        fn clean_invariants((anchors, gts) in arb_scene(), n in 1usize..6, alpha in 0.0..=1.0f64,
                            gamma in 0.0..2.0f64, seed in any::<u64>()) {
            let params = AssignParams { alpha, gamma, num_positives: n, ..AssignParams::default() };
            let deltas: Vec<BoxDelta> = (0..anchors.len())
                .map(|i| {
                    let k = (seed.wrapping_mul(2654435761).wrapping_add(i as u64) % 1000) as f64 / 1000.0 - 0.5;
                    BoxDelta::new(0.2 * k, -0.1 * k, 0.3 * k, 0.1 * k)
                })
                .collect();
            let conf = |a: usize, g: usize| ((a * 7 + g * 13) % 17) as f64 / 17.0;
            let asg = assign_clean(&anchors, &gts, &deltas, &params, conf).unwrap();
            let npos = asg.num_positives();
            prop_assert!(npos <= n * gts.len());
            let mut sum_r = 0.0;
            for e in &asg.entries {
                prop_assert!((0.0..=1.0).contains(&e.soft_label));
                match e.role {
                    CleanRole::Negative => prop_assert!(e.soft_label == 0.0 && e.weight == 1.0),
                    CleanRole::Positive => sum_r += e.weight,
                }
            }
            if npos > 0 {
                prop_assert!((sum_r / npos as f64 - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn zero_deltas_reduce_loc_a_to_anchor_iou((anchors, gts) in arb_scene(), n in 1usize..6) {
            let params = AssignParams { num_positives: n, ..AssignParams::default() };
            let deltas = vec![BoxDelta::ZERO; anchors.len()];
            let asg = assign_clean(&anchors, &gts, &deltas, &params, |_, _| 0.01).unwrap();
            for (a, e) in asg.positives() {
                let want = iou(&anchors[a], &gts[e.gt.unwrap()]);
                prop_assert_eq!(e.loc_a.unwrap().to_bits(), want.to_bits());
            }
        }

        #[test]
        fn selection_is_permutation_invariant((anchors, gts) in arb_scene(), n in 1usize..6, rot in 0usize..40) {
            let k = rot % anchors.len();
            let mut permuted = anchors.clone();
            permuted.rotate_left(k);
            let base = select_positives(&anchors, &gts, n);
            let perm = select_positives(&permuted, &gts, n);
            // only compare when no IoU ties could change truncation
            let ious = iou_matrix(&anchors, &gts);
            let mut tied = false;
            for g in 0..gts.len() {
                let mut col: Vec<f64> = (0..anchors.len()).map(|a| ious.get(a, g)).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                if col.len() > n && col[n - 1] == col[n] { tied = true; }
            }
            prop_assume!(!tied);
            let mapped: BTreeMap<usize, usize> = perm
                .into_iter()
                .map(|(a, g)| ((a + k) % anchors.len(), g))
                .collect();
            prop_assert_eq!(base, mapped);
        }

        #[test]
        fn weight_and_label_monotone_in_loc(cls in 0.0..0.99f64, alpha in 0.01..=1.0f64,
                                             lo in 0.0..0.98f64, step in 0.001..0.01f64) {
            let hi = lo + step;
            prop_assert!(cleanliness(hi, cls, alpha) > cleanliness(lo, cls, alpha));
            prop_assert!(raw_weight(hi, cls, alpha, 1.0, 1e-4) > raw_weight(lo, cls, alpha, 1.0, 1e-4));
        }
    }
}
