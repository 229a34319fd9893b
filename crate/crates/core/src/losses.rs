// SPDX-License-Identifier: Apache-2.0

//! Focal-weighted BCE with soft labels and per-sample weights, smooth-L1 box
//! regression, and their exact gradients.
//!
//! Focal modulating factors, soft labels and sample weights are constants
//! under differentiation. Both losses are divided by the number of positive
//! anchors, clamped below at 1.

use alloc::vec::Vec;

use crate::error::{check_len, invalid, Error, Result};
use crate::geometry::BoxDelta;
use crate::math;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("focal.alpha", "must lie in (0, 1)"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(invalid("focal.gamma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Positive,
    Negative,
    /// Excluded from both losses.
    Ignored,
}

/// Supervision for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub role: Role,
    pub gt: Option<usize>,
    pub class: Option<usize>,
    /// Target for the matched class logit; 0 for negatives.
    pub label: f64,
    /// Multiplier on the positive's loss terms; 1 otherwise.
    pub weight: f64,
}

impl AnchorTarget {
    pub fn positive(gt: usize, class: usize, label: f64, weight: f64) -> Self {
        Self {
            role: Role::Positive,
            gt: Some(gt),
            class: Some(class),
            label,
            weight,
        }
    }

    pub fn negative() -> Self {
        Self {
            role: Role::Negative,
            gt: None,
            class: None,
            label: 0.0,
            weight: 1.0,
        }
    }

    pub fn ignored() -> Self {
        Self {
            role: Role::Ignored,
            ..Self::negative()
        }
    }
}

pub fn num_positives(targets: &[AnchorTarget]) -> usize {
    targets.iter().filter(|t| t.role == Role::Positive).count()
}

fn normalizer(targets: &[AnchorTarget]) -> f64 {
    num_positives(targets).max(1) as f64
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-t * w_p * ln(p) - (1 - t) * w_n * ln(1 - p)` on the clamped probability.
pub fn weighted_bce(p: f64, t: f64, w_p: f64, w_n: f64) -> f64 {
    let p = clamp_prob(p);
    -t * w_p * math::ln(p) - (1.0 - t) * w_n * math::ln(1.0 - p)
}

/// Focal modulating weights `(alpha (1-p)^gamma, (1-alpha) p^gamma)` on the
/// clamped probability.
pub fn focal_weights(p: f64, fp: &FocalParams) -> (f64, f64) {
    let p = clamp_prob(p);
    (
        fp.alpha * math::powf(1.0 - p, fp.gamma),
        (1.0 - fp.alpha) * math::powf(p, fp.gamma),
    )
}

/// Derivative of [`weighted_bce`] w.r.t. the pre-sigmoid logit, weights and
/// target held fixed. Zero where the clamp is active.
pub fn weighted_bce_grad_logit(p: f64, t: f64, w_p: f64, w_n: f64) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        return 0.0;
    }
    -t * w_p * (1.0 - p) + (1.0 - t) * w_n * p
}

/// Classification loss over `num_classes` sigmoid outputs per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub loss: f64,
    /// Row-major `anchors x classes`, normalized like `loss`.
    pub grad_logits: Vec<f64>,
    /// Unnormalized per-anchor contribution.
    pub per_anchor: Vec<f64>,
}

/// Positives contribute `r * BCE(p, c)` on their matched-class output and
/// plain `BCE(p, 0)` on every other class; negatives contribute `BCE(p, 0)`
/// on all classes. `probs` is row-major `anchors x num_classes`.
pub fn classification_loss(
    probs: &[f64],
    num_classes: usize,
    targets: &[AnchorTarget],
    fp: &FocalParams,
) -> Result<ClsLoss> {
    check_len(
        "class probabilities",
        targets.len() * num_classes,
        probs.len(),
    )?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("class probabilities"));
    }
    if targets
        .iter()
        .any(|t| !(t.label.is_finite() && t.weight.is_finite()))
    {
        return Err(Error::NonFinite("anchor targets"));
    }
    let norm = normalizer(targets);
    let mut loss = 0.0;
    let mut grad_logits = alloc::vec![0.0; probs.len()];
    let mut per_anchor = alloc::vec![0.0; targets.len()];
    for (i, t) in targets.iter().enumerate() {
        if t.role == Role::Ignored {
            continue;
        }
        let row = &probs[i * num_classes..(i + 1) * num_classes];
        let mut acc = 0.0;
        for (k, &p) in row.iter().enumerate() {
            let (label, w) = match (t.role, t.class) {
                (Role::Positive, Some(c)) if c == k => (t.label, t.weight),
                _ => (0.0, 1.0),
            };
            let (w_p, w_n) = focal_weights(p, fp);
            acc += w * weighted_bce(p, label, w_p, w_n);
            grad_logits[i * num_classes + k] =
                w * weighted_bce_grad_logit(p, label, w_p, w_n) / norm;
        }
        per_anchor[i] = acc;
        loss += acc;
    }
    Ok(ClsLoss {
        loss: loss / norm,
        grad_logits,
        per_anchor,
    })
}

/// Smooth-L1: `0.5 x^2 / beta` for `|x| < beta`, `|x| - 0.5 beta` otherwise.
#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegLoss {
    pub loss: f64,
    pub grad_deltas: Vec<BoxDelta>,
    pub per_anchor: Vec<f64>,
}

/// `sum_pos r_i * sum_k smooth_l1(pred_ik - target_ik)`. Entries of
/// `target_deltas` for non-positive anchors are never read.
pub fn regression_loss(
    pred_deltas: &[BoxDelta],
    target_deltas: &[BoxDelta],
    targets: &[AnchorTarget],
    beta: f64,
) -> Result<RegLoss> {
    check_len("predicted deltas", targets.len(), pred_deltas.len())?;
    check_len("target deltas", targets.len(), target_deltas.len())?;
    if !(beta > 0.0) {
        return Err(invalid("beta", "must be positive"));
    }
    let norm = normalizer(targets);
    let mut loss = 0.0;
    let mut grad_deltas = alloc::vec![BoxDelta::ZERO; targets.len()];
    let mut per_anchor = alloc::vec![0.0; targets.len()];
    for (i, t) in targets.iter().enumerate() {
        if t.role != Role::Positive {
            continue;
        }
        let pred = pred_deltas[i].to_array();
        let tgt = target_deltas[i].to_array();
        let mut grad = [0.0; 4];
        let mut acc = 0.0;
        for k in 0..4 {
            let d = pred[k] - tgt[k];
            acc += smooth_l1(d, beta);
            grad[k] = t.weight * smooth_l1_grad(d, beta) / norm;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite("regression residual"));
        }
        per_anchor[i] = t.weight * acc;
        loss += t.weight * acc;
        grad_deltas[i] = BoxDelta::from_array(grad);
    }
    Ok(RegLoss {
        loss: loss / norm,
        grad_deltas,
        per_anchor,
    })
}

/// Both losses and their gradients for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub num_positives: usize,
    pub grad_logits: Vec<f64>,
    pub grad_deltas: Vec<BoxDelta>,
    pub per_anchor_cls: Vec<f64>,
    pub per_anchor_reg: Vec<f64>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.cls_loss + self.reg_loss
    }

    pub fn is_finite(&self) -> bool {
        self.cls_loss.is_finite()
            && self.reg_loss.is_finite()
            && self.grad_logits.iter().all(|g| g.is_finite())
            && self
                .grad_deltas
                .iter()
                .all(|d| d.to_array().iter().all(|g| g.is_finite()))
    }
}

pub fn loss_report(
    probs: &[f64],
    num_classes: usize,
    pred_deltas: &[BoxDelta],
    target_deltas: &[BoxDelta],
    targets: &[AnchorTarget],
    fp: &FocalParams,
    beta: f64,
) -> Result<LossReport> {
    let cls = classification_loss(probs, num_classes, targets, fp)?;
    let reg = regression_loss(pred_deltas, target_deltas, targets, beta)?;
    Ok(LossReport {
        cls_loss: cls.loss,
        reg_loss: reg.loss,
        num_positives: num_positives(targets),
        grad_logits: cls.grad_logits,
        grad_deltas: reg.grad_deltas,
        per_anchor_cls: cls.per_anchor,
        per_anchor_reg: reg.per_anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn bce_examples() {
        assert!(weighted_bce(1.0, 1.0, 1.0, 1.0) < 1e-6);
        assert!(weighted_bce(0.0, 0.0, 1.0, 1.0) < 1e-6);
        // -0.7 ln 0.7 - 0.3 ln 0.3
        assert!((weighted_bce(0.7, 0.7, 1.0, 1.0) - 0.610_864_302_054_894).abs() < 1e-4);
    }

    #[test]
    fn focal_weight_examples() {
        let fp = FocalParams {
            alpha: 0.3,
            gamma: 0.0,
        };
        for p in [0.01, 0.5, 0.93] {
            assert_eq!(focal_weights(p, &fp), (0.3, 0.7));
        }
        let (wp, wn) = focal_weights(
            0.9,
            &FocalParams {
                alpha: 0.25,
                gamma: 2.0,
            },
        );
        assert!((wp - 0.0025).abs() < 1e-12 && (wn - 0.6075).abs() < 1e-12);
        let (wp, wn) = focal_weights(
            0.5,
            &FocalParams {
                alpha: 0.5,
                gamma: 1.0,
            },
        );
        assert!((wp - 0.25).abs() < 1e-15 && (wn - 0.25).abs() < 1e-15);
    }

    #[test]
    fn no_positives_and_confident_negatives_cost_nothing() {
        let targets = vec![AnchorTarget::negative(); 3];
        let probs = vec![1e-9; 3];
        let l = classification_loss(&probs, 1, &targets, &FocalParams::default()).unwrap();
        assert!(l.loss < 1e-6);
    }

    #[test]
    fn hard_positive_reduces_to_half_bce() {
        let fp = FocalParams {
            alpha: 0.5,
            gamma: 0.0,
        };
        let targets = vec![AnchorTarget::positive(0, 0, 1.0, 1.0)];
        let p = 0.37;
        let l = classification_loss(&[p], 1, &targets, &fp).unwrap();
        assert!((l.loss - 0.5 * -libm::log(p)).abs() < 1e-15);
    }

    #[test]
    fn ignored_anchors_do_not_contribute() {
        let targets = vec![AnchorTarget::ignored(), AnchorTarget::negative()];
        let l = classification_loss(&[0.9, 0.2], 1, &targets, &FocalParams::default()).unwrap();
        assert_eq!(l.per_anchor[0], 0.0);
        assert_eq!(l.grad_logits[0], 0.0);
        assert!(l.per_anchor[1] > 0.0);
    }

    #[test]
    fn non_finite_probabilities_are_rejected() {
        let targets = vec![AnchorTarget::negative()];
        let err = classification_loss(&[f64::NAN], 1, &targets, &FocalParams::default());
        assert_eq!(err, Err(Error::NonFinite("class probabilities")));
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 0.5), 0.0);
        let beta = 0.3;
        assert!((smooth_l1(beta, beta) - 0.5 * beta).abs() < 1e-15);
        assert!((0.5 * beta * beta / beta - 0.5 * beta).abs() < 1e-15);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
    }

    #[test]
    fn regression_perfect_prediction() {
        let d = vec![BoxDelta::new(0.1, -0.2, 0.3, 0.0); 2];
        let targets = vec![
            AnchorTarget::positive(0, 0, 1.0, 1.0),
            AnchorTarget::negative(),
        ];
        let l = regression_loss(&d, &d, &targets, 1.0 / 9.0).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grad_deltas.iter().all(|g| *g == BoxDelta::ZERO));
    }

    #[test]
    fn regression_normalized_weights_absorb_scale() {
        use crate::assignment::normalize_mean_one;
        let pred = vec![
            BoxDelta::new(0.3, 0.1, -0.2, 0.5),
            BoxDelta::new(-0.4, 0.0, 0.2, 0.1),
        ];
        let tgt = vec![BoxDelta::ZERO; 2];
        let run = |raw: Vec<f64>| {
            let mut r = raw;
            normalize_mean_one(&mut r);
            let targets: Vec<_> = r
                .iter()
                .map(|&w| AnchorTarget::positive(0, 0, 1.0, w))
                .collect();
            regression_loss(&pred, &tgt, &targets, 1.0 / 9.0)
                .unwrap()
                .loss
        };
        let a = run(vec![1.5, 3.25]);
        let b = run(vec![3.0, 6.5]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn regression_shape_errors() {
        let targets = vec![AnchorTarget::negative(); 2];
        let d = vec![BoxDelta::ZERO; 1];
        assert!(matches!(
            regression_loss(&d, &d, &targets, 0.1),
            Err(Error::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn unit_weight_bce_minimized_at_target(t in 0.02..0.98f64) {
            let below = weighted_bce_grad_logit(t - 0.01, t, 1.0, 1.0);
            let above = weighted_bce_grad_logit(t + 0.01, t, 1.0, 1.0);
            prop_assert!(below < 0.0 && above > 0.0);
            prop_assert!(weighted_bce(t, t, 1.0, 1.0) <= weighted_bce(t + 0.01, t, 1.0, 1.0));
            prop_assert!(weighted_bce(t, t, 1.0, 1.0) <= weighted_bce(t - 0.01, t, 1.0, 1.0));
        }

        #[test]
        fn losses_non_negative_and_finite(logits in prop::collection::vec(-30.0..30.0f64, 6),
                                          label in 0.0..=1.0f64, w in 0.0..5.0f64) {
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let targets = vec![
                AnchorTarget::positive(0, 1, label, w),
                AnchorTarget::negative(),
                AnchorTarget::ignored(),
            ];
            let l = classification_loss(&probs, 2, &targets, &FocalParams::default()).unwrap();
            prop_assert!(l.loss.is_finite() && l.loss >= 0.0);
            prop_assert!(l.grad_logits.iter().all(|g| g.is_finite()));
            let pred: Vec<BoxDelta> = logits.chunks(2).map(|c| BoxDelta::new(c[0], c[1], -c[0], 0.5)).collect();
            let r = regression_loss(&pred, &[BoxDelta::ZERO; 3], &targets, 1.0 / 9.0).unwrap();
            prop_assert!(r.loss.is_finite() && r.loss >= 0.0);
        }
    }
}
