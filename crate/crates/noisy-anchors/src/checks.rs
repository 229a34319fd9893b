// SPDX-License-Identifier: Apache-2.0

//! Randomized oracle and invariant suites. Each returns a [`CheckOutcome`]
//! with the measured worst case, so callers can print or assert on it.

use noisy_anchors_core::anchors::{self, AnchorConfig, AnchorLevel, AnchorSet};
use noisy_anchors_core::assignment::{assign_clean_with, assign_hard_with, CleanRole};
use noisy_anchors_core::eval::{
    average_precision, nms, pearson, top_fraction_stats, MAX_DETECTIONS,
};
use noisy_anchors_core::geometry::{iou, iou_matrix};
use noisy_anchors_core::losses::{classification_loss, regression_loss};
use noisy_anchors_core::model::{
    build_targets, forward, HeadParams, HeadShape, LossConfig, Method,
};
use noisy_anchors_core::synth::generate_scene;
use noisy_anchors_core::{
    AssignParams, BBox, BoxDelta, Detection, FocalParams, GenConfig, GroundTruth,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles::{
    ap_reference, check_delta_grad, check_logit_grad, check_param_grad, focal_baseline_reference,
    nms_reference, pearson_reference, top_fraction_reference, GradReport,
};

/// Finite-difference step of the gradient checks.
pub const FD_STEP: f64 = 1e-6;
/// Worst tolerated relative gradient error.
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small anchor grid keeping randomized checks fast.
pub fn small_anchors(size: f64) -> AnchorSet {
    anchors::generate(&AnchorConfig {
        levels: vec![
            AnchorLevel {
                stride: 8.0,
                base_size: 12.0,
            },
            AnchorLevel {
                stride: 16.0,
                base_size: 24.0,
            },
        ],
        image_width: size,
        image_height: size,
        ..AnchorConfig::default()
    })
    .expect("valid anchor config")
}

fn random_box(r: &mut ChaCha8Rng, size: f64, min_side: f64) -> BBox {
    let w = r.random_range(min_side..size * 0.6);
    let h = r.random_range(min_side..size * 0.6);
    let x = r.random_range(0.0..size - w);
    let y = r.random_range(0.0..size - h);
    BBox::new(x, y, x + w, y + h)
}

fn random_gts(r: &mut ChaCha8Rng, size: f64, n: usize, classes: usize) -> Vec<GroundTruth> {
    (0..n)
        .map(|_| GroundTruth {
            bbox: random_box(r, size, 6.0),
            class: r.random_range(0..classes),
        })
        .collect()
}

fn random_deltas(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<BoxDelta> {
    (0..n)
        .map(|_| {
            BoxDelta::new(
                r.random_range(-scale..scale),
                r.random_range(-scale..scale),
                r.random_range(-scale..scale),
                r.random_range(-scale..scale),
            )
        })
        .collect()
}

/// Analytic gradients of both losses w.r.t. logits, deltas and every head
/// parameter against central differences, over `per_combo` random draws of
/// each (alpha, gamma, focal gamma) combination.
pub fn gradient_fidelity(per_combo: usize, seed: u64) -> CheckOutcome {
    let alphas = [0.0, 0.5, 0.75, 1.0];
    let gammas = [0.0, 1.0, 1.5];
    let focal_gammas = [0.0, 2.0];
    let methods = [
        Method::FULL,
        Method::SOFT_LABELS,
        Method::REWEIGHTING,
        Method::BASELINE,
    ];
    let set = small_anchors(40.0);
    let gen = GenConfig {
        size_range: (10.0, 24.0),
        objects_per_scene: (1, 3),
        ..GenConfig::default()
    };
    let mut r = rng(seed);
    let mut logits_rep = GradReport::default();
    let mut delta_rep = GradReport::default();
    let mut param_rep = GradReport::default();
    let mut configs = 0;
    for &alpha in &alphas {
        for &gamma in &gammas {
            for &fg in &focal_gammas {
                for _ in 0..per_combo {
                    let method = methods[configs % methods.len()];
                    let cfg = LossConfig {
                        method,
                        assign: AssignParams {
                            alpha,
                            gamma,
                            num_positives: r.random_range(3..12),
                            ..AssignParams::default()
                        },
                        focal: FocalParams {
                            alpha: r.random_range(0.1..0.9),
                            gamma: fg,
                        },
                        beta: r.random_range(0.05..0.5),
                    };
                    let scene = generate_scene(&gen, &set, r.random()).expect("scene");
                    let shape = HeadShape {
                        feature_dim: gen.feature_dim(),
                        num_classes: gen.num_classes,
                        hidden: if configs % 2 == 0 { 0 } else { 3 },
                    };
                    let mut params = HeadParams::init(shape, 0.1, 0.5, r.random()).expect("init");
                    for v in params.values.iter_mut() {
                        *v += r.random_range(-0.3..0.3);
                    }
                    configs += 1;

                    let out = forward(&params, &scene.features).expect("forward");
                    let st = build_targets(&set, &scene, &out, &cfg).expect("targets");
                    let cls =
                        classification_loss(&out.probs, out.num_classes, &st.targets, &cfg.focal)
                            .expect("cls");
                    logits_rep = logits_rep.merge(check_logit_grad(
                        &out.logits,
                        out.num_classes,
                        &st.targets,
                        &cfg.focal,
                        &cls.grad_logits,
                        FD_STEP,
                    ));
                    let reg =
                        regression_loss(&out.deltas, &st.target_deltas, &st.targets, cfg.beta)
                            .expect("reg");
                    delta_rep = delta_rep.merge(check_delta_grad(
                        &out.deltas,
                        &st.target_deltas,
                        &st.targets,
                        cfg.beta,
                        &reg.grad_deltas,
                        FD_STEP,
                    ));
                    param_rep = param_rep.merge(
                        check_param_grad(&params, &set, &scene, &cfg, FD_STEP).expect("params"),
                    );
                }
            }
        }
    }
    let worst = logits_rep
        .max_rel_err
        .max(delta_rep.max_rel_err)
        .max(param_rep.max_rel_err);
    CheckOutcome::new(
        "gradient fidelity",
        configs >= 100 && worst <= GRAD_TOL,
        format!(
            "{configs} configs; max rel err logits {:.2e}, deltas {:.2e}, params {:.2e} ({} values)",
            logits_rep.max_rel_err,
            delta_rep.max_rel_err,
            param_rep.max_rel_err,
            logits_rep.checked + delta_rep.checked + param_rep.checked
        ),
    )
}

/// Mean-one re-weighting over each image's positives; negatives carry
/// `c = 0`, `r = 1`.
pub fn normalization_invariant(images: usize, seed: u64) -> CheckOutcome {
    let set = small_anchors(64.0);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut bad_negatives = 0;
    for _ in 0..images {
        let n = r.random_range(1..6);
        let gts: Vec<BBox> = (0..n).map(|_| random_box(&mut r, 64.0, 6.0)).collect();
        let deltas = random_deltas(&mut r, set.len(), 0.3);
        let probs: Vec<f64> = (0..set.len() * n)
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        let params = AssignParams {
            alpha: r.random_range(0.0..=1.0),
            gamma: r.random_range(0.0..3.0),
            num_positives: r.random_range(1..40),
            ..AssignParams::default()
        };
        let ious = iou_matrix(&set.boxes, &gts);
        let clean = assign_clean_with(&set.boxes, &ious, &gts, &deltas, &params, |a, g| {
            probs[a * n + g]
        })
        .expect("assignment");
        let w: Vec<f64> = clean.positives().map(|(_, e)| e.weight).collect();
        if !w.is_empty() {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            worst = worst.max((mean - 1.0).abs());
        }
        bad_negatives += clean
            .entries
            .iter()
            .filter(|e| e.role == CleanRole::Negative && !(e.soft_label == 0.0 && e.weight == 1.0))
            .count();
    }
    CheckOutcome::new(
        "normalization invariant",
        worst <= 1e-9 && bad_negatives == 0,
        format!("{images} images; max |mean(r) - 1| {worst:.2e}; negatives with c != 0 or r != 1: {bad_negatives}"),
    )
}

/// gamma = 0 gives r = 1, alpha = 1 gives c = loc_a, alpha = 0 gives c =
/// cls_c, and the hard-label pipeline equals a directly written focal loss.
pub fn degeneracy(trials: usize, seed: u64) -> CheckOutcome {
    let set = small_anchors(64.0);
    let gen = GenConfig {
        size_range: (10.0, 30.0),
        ..GenConfig::default()
    };
    let mut r = rng(seed);
    let (mut gamma_dev, mut a1_dev, mut a0_dev, mut loss_dev): (f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0);
    for _ in 0..trials {
        let n = r.random_range(1..5);
        let gts: Vec<BBox> = (0..n).map(|_| random_box(&mut r, 64.0, 6.0)).collect();
        let deltas = random_deltas(&mut r, set.len(), 0.3);
        let probs: Vec<f64> = (0..set.len() * n)
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        let ious = iou_matrix(&set.boxes, &gts);
        let conf = |a: usize, g: usize| probs[a * n + g];
        let run = |alpha: f64, gamma: f64| {
            let p = AssignParams {
                alpha,
                gamma,
                ..AssignParams::default()
            };
            assign_clean_with(&set.boxes, &ious, &gts, &deltas, &p, conf).expect("assignment")
        };
        for (_, e) in run(r.random_range(0.0..=1.0), 0.0).positives() {
            gamma_dev = gamma_dev.max((e.weight - 1.0).abs());
        }
        for (_, e) in run(1.0, r.random_range(0.0..2.0)).positives() {
            a1_dev = a1_dev.max((e.soft_label - e.loc_a.expect("positive")).abs());
        }
        for (_, e) in run(0.0, r.random_range(0.0..2.0)).positives() {
            a0_dev = a0_dev.max((e.soft_label - e.cls_c.expect("positive")).abs());
        }

        // full hard-label pipeline on a scene with random predictions
        let scene = generate_scene(&gen, &set, r.random()).expect("scene");
        let shape = HeadShape {
            feature_dim: gen.feature_dim(),
            num_classes: gen.num_classes,
            hidden: 0,
        };
        let mut params = HeadParams::init(shape, 0.05, 1.0, r.random()).expect("init");
        for v in params.values.iter_mut() {
            *v += r.random_range(-0.5..0.5);
        }
        let focal = FocalParams {
            alpha: r.random_range(0.1..0.9),
            gamma: [0.0, 1.0, 2.0][r.random_range(0..3)],
        };
        let cfg = LossConfig {
            method: Method::BASELINE,
            focal,
            ..LossConfig::default()
        };
        let out = forward(&params, &scene.features).expect("forward");
        let st = build_targets(&set, &scene, &out, &cfg).expect("targets");
        let ours = classification_loss(&out.probs, out.num_classes, &st.targets, &focal)
            .expect("loss")
            .loss;
        let hard = assign_hard_with(&iou_matrix(&set.boxes, &scene.gt_boxes()), &cfg.assign);
        let direct = focal_baseline_reference(
            &out.probs,
            out.num_classes,
            &hard,
            &scene.gt_classes(),
            &focal,
        );
        loss_dev = loss_dev.max((ours - direct).abs());
    }
    CheckOutcome::new(
        "degeneracy",
        gamma_dev == 0.0 && a1_dev <= 1e-15 && a0_dev <= 1e-15 && loss_dev <= 1e-12,
        format!(
            "{trials} trials; gamma=0 max |r-1| {gamma_dev:.1e}; alpha=1 max |c-loc| {a1_dev:.1e}; \
             alpha=0 max |c-cls| {a0_dev:.1e}; baseline loss max diff {loss_dev:.1e}"
        ),
    )
}

/// With zero predicted deltas every positive's loc_a is bitwise the
/// anchor/GT IoU.
pub fn cold_start_identity(scenes: usize, seed: u64) -> CheckOutcome {
    let set = anchors::generate(&AnchorConfig::default()).expect("anchors");
    let gen = GenConfig::default();
    let shape = HeadShape {
        feature_dim: gen.feature_dim(),
        num_classes: gen.num_classes,
        hidden: 0,
    };
    let params = HeadParams::init(shape, 0.01, 0.01, seed).expect("init");
    let mut checked = 0;
    let mut mismatches = 0;
    let mut nonzero_deltas = 0;
    for i in 0..scenes as u64 {
        let scene = generate_scene(&gen, &set, seed.wrapping_mul(1_000_003).wrapping_add(i))
            .expect("scene");
        let out = forward(&params, &scene.features).expect("forward");
        nonzero_deltas += out
            .deltas
            .iter()
            .filter(|d| d.to_array() != [0.0; 4])
            .count();
        let gts = scene.gt_boxes();
        let ious = iou_matrix(&set.boxes, &gts);
        let classes = scene.gt_classes();
        let clean = assign_clean_with(
            &set.boxes,
            &ious,
            &gts,
            &out.deltas,
            &AssignParams::default(),
            |a, g| out.prob(a, classes[g]),
        )
        .expect("assignment");
        for (a, e) in clean.positives() {
            let g = e.gt.expect("positive");
            checked += 1;
            let want = iou(&set.boxes[a], &gts[g]);
            if e.loc_a.expect("positive").to_bits() != want.to_bits() {
                mismatches += 1;
            }
        }
    }
    CheckOutcome::new(
        "cold-start identity",
        checked > 0 && mismatches == 0 && nonzero_deltas == 0,
        format!("{checked} positives over {scenes} scenes; bitwise mismatches {mismatches}; nonzero initial deltas {nonzero_deltas}"),
    )
}

fn random_detections(r: &mut ChaCha8Rng, n: usize, classes: usize, size: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            // coarse confidences so ties actually occur
            let confidence = if r.random_bool(0.3) {
                r.random_range(0..5) as f64 / 4.0
            } else {
                r.random_range(0.0..=1.0)
            };
            Detection {
                bbox: random_box(r, size, 4.0),
                class: r.random_range(0..classes),
                confidence,
            }
        })
        .collect()
}

pub fn nms_equivalence(instances: usize, seed: u64) -> CheckOutcome {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = r.random_range(0..=50);
        let mut dets = random_detections(&mut r, n, 3, 40.0);
        // exact duplicates exercise the tie rule
        if n > 2 && r.random_bool(0.5) {
            dets[1] = dets[0];
        }
        let t = [0.0, 0.3, 0.5, 0.7, 1.0][r.random_range(0..5)];
        if nms(&dets, t) != nms_reference(&dets, t) {
            mismatches += 1;
        }
    }
    CheckOutcome::new(
        "nms oracle",
        mismatches == 0,
        format!("{instances} instances of <= 50 boxes; mismatches {mismatches}"),
    )
}

pub fn ap_equivalence(instances: usize, seed: u64) -> CheckOutcome {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let scenes = r.random_range(1..4);
        let classes = r.random_range(1..4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        let mut remaining = r.random_range(0..=10usize);
        for s in 0..scenes {
            let count = r.random_range(0..4);
            let g = random_gts(&mut r, 40.0, count, classes);
            let take = if s + 1 == scenes {
                remaining
            } else {
                r.random_range(0..=remaining)
            };
            remaining -= take;
            let mut d = Vec::with_capacity(take);
            for _ in 0..take {
                // mostly jittered copies of a GT so matches happen
                let det = match g.get(r.random_range(0..g.len().max(1))) {
                    Some(gt) if r.random_bool(0.7) => {
                        let j = r.random_range(-3.0..3.0);
                        Detection {
                            bbox: gt.bbox.translate(j, -j * 0.5),
                            class: if r.random_bool(0.8) {
                                gt.class
                            } else {
                                r.random_range(0..classes)
                            },
                            confidence: r.random_range(0..6) as f64 / 5.0,
                        }
                    }
                    _ => random_detections(&mut r, 1, classes, 40.0)[0],
                };
                d.push(det);
            }
            gts.push(g);
            dets.push(d);
        }
        let t = [0.5, 0.65, 0.8, 0.95][r.random_range(0..4)];
        let ours = average_precision(&dets, &gts, t);
        let reference = ap_reference(&dets, &gts, t, MAX_DETECTIONS);
        worst = worst.max((ours - reference).abs());
    }
    CheckOutcome::new(
        "ap oracle",
        worst <= 1e-12,
        format!("{instances} instances of <= 10 detections; max |ap - ref| {worst:.2e}"),
    )
}

pub fn pearson_equivalence(instances: usize, seed: u64) -> CheckOutcome {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut undefined_mismatch = 0;
    let track = |a: Option<f64>, b: Option<f64>, worst: &mut f64| match (a, b) {
        (Some(x), Some(y)) => {
            *worst = worst.max((x - y).abs());
            0
        }
        (None, None) => 0,
        _ => 1,
    };
    for _ in 0..instances {
        let n = r.random_range(0..300);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let c: f64 = r.random_range(0.0..1.0);
                (c, (0.6 * c + r.random_range(0.0..0.4)).min(1.0))
            })
            .collect();
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        undefined_mismatch += track(pearson(&xs, &ys), pearson_reference(&xs, &ys), &mut worst);
        let frac = [0.02, 0.1, 0.5, 1.0][r.random_range(0..4)];
        let ours = top_fraction_stats(&pairs, frac).expect("valid fraction");
        let (count, mc, mi, pr) = top_fraction_reference(&pairs, frac);
        if count != ours.count {
            undefined_mismatch += 1;
        }
        undefined_mismatch += track(ours.mean_confidence, mc, &mut worst);
        undefined_mismatch += track(ours.mean_iou, mi, &mut worst);
        undefined_mismatch += track(ours.pearson, pr, &mut worst);
    }
    CheckOutcome::new(
        "pearson oracle",
        worst <= 1e-12 && undefined_mismatch == 0,
        format!("{instances} instances; max deviation {worst:.2e}; definedness/count mismatches {undefined_mismatch}"),
    )
}

/// Criteria 1 through 5 at their specified sizes.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        gradient_fidelity(5, seed),
        normalization_invariant(1000, seed + 1),
        degeneracy(200, seed + 2),
        cold_start_identity(20, seed + 3),
        nms_equivalence(1000, seed + 4),
        ap_equivalence(500, seed + 5),
        pearson_equivalence(500, seed + 6),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_check_catches_small_errors() {
        let set = small_anchors(40.0);
        let gen = GenConfig {
            size_range: (10.0, 24.0),
            ..GenConfig::default()
        };
        let cfg = LossConfig::default();
        let scene = generate_scene(&gen, &set, 3).unwrap();
        let shape = HeadShape {
            feature_dim: gen.feature_dim(),
            num_classes: gen.num_classes,
            hidden: 0,
        };
        let params = HeadParams::init(shape, 0.1, 0.5, 4).unwrap();
        let out = forward(&params, &scene.features).unwrap();
        let st = build_targets(&set, &scene, &out, &cfg).unwrap();
        let k = out.num_classes;
        let cls = classification_loss(&out.probs, k, &st.targets, &cfg.focal).unwrap();
        let reg = regression_loss(&out.deltas, &st.target_deltas, &st.targets, cfg.beta).unwrap();

        let logit_err = |g: &[f64]| {
            check_logit_grad(&out.logits, k, &st.targets, &cfg.focal, g, FD_STEP).max_rel_err
        };
        let delta_err = |g: &[BoxDelta]| {
            check_delta_grad(
                &out.deltas,
                &st.target_deltas,
                &st.targets,
                cfg.beta,
                g,
                FD_STEP,
            )
            .max_rel_err
        };
        assert!(logit_err(&cls.grad_logits) <= GRAD_TOL);
        assert!(delta_err(&reg.grad_deltas) <= GRAD_TOL);

        // a relative slip ten times the tolerance must show
        let scaled: Vec<f64> = cls.grad_logits.iter().map(|g| g * (1.0 + 1e-4)).collect();
        assert!(logit_err(&scaled) > GRAD_TOL);
        let mut flipped = reg.grad_deltas.clone();
        let i = (0..flipped.len())
            .max_by(|&a, &b| flipped[a].dx.abs().total_cmp(&flipped[b].dx.abs()))
            .unwrap();
        assert!(flipped[i].dx != 0.0);
        flipped[i].dx = -flipped[i].dx;
        assert!(delta_err(&flipped) > GRAD_TOL);
    }
}
