// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic detection scenes.
//!
//! A scene holds annotated objects and unannotated *distractors*: object-like
//! clutter placed so that it partially overlaps an annotated object. Each
//! anchor gets a feature vector describing what it "sees":
//!
//! | slice                  | content                                            |
//! |------------------------|----------------------------------------------------|
//! | `[0, K)`               | max visible IoU with annotated objects of class `k` |
//! | `[K, 2K)`              | max IoU with distractors of class `k`               |
//! | `[2K, 2K + 4)`         | box delta towards the visible content (see below)   |
//!
//! The delta channel is an IoU-weighted blend of `encode(anchor, o')` over all
//! visible objects `o` (annotated or not), with weights `IoU^blend_power`,
//! where `o'` is the part of `o` inside the anchor's receptive field (the
//! anchor scaled by `receptive_field` about its centre). An anchor that only
//! grazes an object sees a truncated box, so its regression signal is biased
//! in proportion to how badly it is placed.
//! Anchors covering an object next to a distractor therefore carry a
//! regression signal that is pulled towards the distractor: their IoU label
//! says "object", their content says otherwise. Gaussian noise of standard
//! deviation `feature_noise` is added to every channel.
//!
//! A distractor also occludes: the object channel reports the anchor's IoU
//! with an object scaled down by the share of their overlap that a
//! distractor covers (times `occlusion`). Without distractors it is the plain
//! anchor IoU.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with the scene seed;
//! stream 0 drives the layout and stream 1 the feature noise, so features can
//! be regenerated from a stored layout.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::anchors::AnchorSet;
use crate::error::{invalid, Error, Result};
use crate::geometry::{encode, iou, iou_matrix, BBox};
use crate::math;

const LAYOUT_STREAM: u64 = 0;
const FEATURE_STREAM: u64 = 1;

/// Max IoU allowed between two annotated objects placed independently.
const SEPARATE_MAX_IOU: f64 = 0.05;
/// IoU band for deliberately overlapping object pairs.
const OVERLAP_BAND: (f64, f64) = (0.05, 0.3);

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GroundTruth {
    #[cfg_attr(feature = "serde", serde(rename = "box"))]
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GenConfig {
    pub num_classes: usize,
    /// Inclusive range of annotated objects per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive range of the nominal object side in pixels.
    pub size_range: (f64, f64),
    /// Probability that an object is placed overlapping an earlier one.
    pub overlap_rate: f64,
    /// Probability that an object gets a neighbouring distractor.
    pub distractor_rate: f64,
    /// IoU band between a distractor and the object it sits next to.
    pub distractor_iou: (f64, f64),
    /// How strongly distractors hide the objects behind them in the object
    /// IoU channel, in `[0, 1]`.
    pub occlusion: f64,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
    /// Exponent of the IoU weights in the delta-channel blend.
    pub blend_power: f64,
    /// Side of an anchor's receptive field relative to the anchor. Content
    /// outside it is invisible to the delta channel.
    pub receptive_field: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            objects_per_scene: (1, 3),
            size_range: (28.0, 96.0),
            overlap_rate: 0.2,
            distractor_rate: 0.3,
            distractor_iou: (0.1, 0.4),
            occlusion: 1.0,
            feature_noise: 0.1,
            blend_power: 1.0,
            receptive_field: 1.5,
            max_retries: 1000,
        }
    }
}

impl GenConfig {
    pub fn feature_dim(&self) -> usize {
        2 * self.num_classes + 4
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| (0.0..=1.0).contains(&v);
        if self.num_classes == 0 {
            return Err(invalid("num_classes", "must be at least 1"));
        }
        let (lo, hi) = self.objects_per_scene;
        if lo > hi {
            return Err(invalid("objects_per_scene", "min exceeds max"));
        }
        let (smin, smax) = self.size_range;
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return Err(invalid("size_range", "need 0 < min <= max"));
        }
        if !rate(self.overlap_rate) {
            return Err(invalid("overlap_rate", "must lie in [0, 1]"));
        }
        if !rate(self.distractor_rate) {
            return Err(invalid("distractor_rate", "must lie in [0, 1]"));
        }
        let (dlo, dhi) = self.distractor_iou;
        if !(rate(dlo) && rate(dhi) && dlo <= dhi) {
            return Err(invalid("distractor_iou", "need 0 <= min <= max <= 1"));
        }
        if !rate(self.occlusion) {
            return Err(invalid("occlusion", "must lie in [0, 1]"));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0) {
            return Err(invalid("feature_noise", "must be finite and >= 0"));
        }
        if !(self.blend_power.is_finite() && self.blend_power > 0.0) {
            return Err(invalid("blend_power", "must be positive"));
        }
        if !(self.receptive_field.is_finite() && self.receptive_field > 0.0) {
            return Err(invalid("receptive_field", "must be positive and finite"));
        }
        if self.max_retries == 0 {
            return Err(invalid("max_retries", "must be at least 1"));
        }
        Ok(())
    }
}

/// Object placement of one scene, without features.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Layout {
    pub width: f64,
    pub height: f64,
    pub seed: u64,
    pub objects: Vec<GroundTruth>,
    pub distractors: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub layout: Layout,
    pub feature_dim: usize,
    /// Row-major `anchors x feature_dim`.
    pub features: Vec<f64>,
}

impl Scene {
    pub fn seed(&self) -> u64 {
        self.layout.seed
    }

    pub fn objects(&self) -> &[GroundTruth] {
        &self.layout.objects
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.layout.objects.iter().map(|g| g.bbox).collect()
    }

    pub fn gt_classes(&self) -> Vec<usize> {
        self.layout.objects.iter().map(|g| g.class).collect()
    }

    pub fn feature_row(&self, anchor: usize) -> &[f64] {
        &self.features[anchor * self.feature_dim..(anchor + 1) * self.feature_dim]
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_box(rng: &mut ChaCha8Rng, cfg: &GenConfig, width: f64, height: f64, scale: f64) -> BBox {
    let side = uniform(rng, cfg.size_range.0, cfg.size_range.1) * scale;
    let ratio = math::exp(uniform(
        rng,
        -core::f64::consts::LN_2,
        core::f64::consts::LN_2,
    ));
    let root = math::sqrt(ratio);
    let w = (side * root).min(width);
    let h = (side / root).min(height);
    let x1 = uniform(rng, 0.0, width - w);
    let y1 = uniform(rng, 0.0, height - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Re-centre `b` at a random point near `anchor_obj` while keeping it in the image.
fn place_near(rng: &mut ChaCha8Rng, b: BBox, near: &BBox, width: f64, height: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = near.center();
    let reach_x = 0.5 * (near.width() + w);
    let reach_y = 0.5 * (near.height() + h);
    let nx = (cx + uniform(rng, -reach_x, reach_x)).clamp(0.5 * w, width - 0.5 * w);
    let ny = (cy + uniform(rng, -reach_y, reach_y)).clamp(0.5 * h, height - 0.5 * h);
    BBox::from_center(nx, ny, w, h)
}

fn max_iou(b: &BBox, others: &[GroundTruth]) -> f64 {
    others.iter().map(|o| iou(b, &o.bbox)).fold(0.0, f64::max)
}

fn in_band(v: f64, band: (f64, f64)) -> bool {
    v >= band.0 && v <= band.1
}

/// Sample the object and distractor placement for one seed.
pub fn generate_layout(cfg: &GenConfig, width: f64, height: f64, seed: u64) -> Result<Layout> {
    cfg.validate()?;
    if !(width > 0.0 && height > 0.0) {
        return Err(invalid("image size", "scenes need a positive image size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LAYOUT_STREAM);
    let (lo, hi) = cfg.objects_per_scene;
    let count = rng.random_range(lo..=hi);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.num_classes);
        let overlapping = !objects.is_empty() && rng.random::<f64>() < cfg.overlap_rate;
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let mut b = sample_box(&mut rng, cfg, width, height, 1.0);
            let ok = if overlapping {
                let partner = objects[rng.random_range(0..objects.len())].bbox;
                b = place_near(&mut rng, b, &partner, width, height);
                in_band(iou(&b, &partner), OVERLAP_BAND) && max_iou(&b, &objects) <= OVERLAP_BAND.1
            } else {
                max_iou(&b, &objects) <= SEPARATE_MAX_IOU
            };
            if ok && b.has_positive_area() {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or(Error::InfeasiblePlacement {
            constraint: if overlapping {
                "object overlap band"
            } else {
                "object separation"
            },
            retries: cfg.max_retries,
        })?;
        objects.push(GroundTruth { bbox, class });
    }

    let mut distractors: Vec<GroundTruth> = Vec::new();
    for idx in 0..objects.len() {
        if rng.random::<f64>() >= cfg.distractor_rate {
            continue;
        }
        let host = objects[idx].bbox;
        let class = rng.random_range(0..cfg.num_classes);
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let scale = uniform(&mut rng, 0.7, 1.3);
            let b = sample_box(&mut rng, cfg, width, height, scale);
            let b = place_near(&mut rng, b, &host, width, height);
            let others = objects
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != idx)
                .all(|(_, o)| iou(&b, &o.bbox) <= cfg.distractor_iou.1);
            if in_band(iou(&b, &host), cfg.distractor_iou) && others && b.has_positive_area() {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or(Error::InfeasiblePlacement {
            constraint: "distractor overlap band",
            retries: cfg.max_retries,
        })?;
        distractors.push(GroundTruth { bbox, class });
    }

    Ok(Layout {
        width,
        height,
        seed,
        objects,
        distractors,
    })
}

/// Largest fraction of `anchor ∩ object` covered by a single distractor.
fn occluded(anchor: &BBox, object: &BBox, distractors: &[BBox]) -> f64 {
    let Some(seen) = anchor.intersection(object) else {
        return 0.0;
    };
    distractors
        .iter()
        .map(|d| seen.intersection_area(d) / seen.area())
        .fold(0.0, f64::max)
}

/// Per-anchor features for a layout; see the module docs for the layout of
/// a feature row.
pub fn scene_features(cfg: &GenConfig, anchors: &AnchorSet, layout: &Layout) -> Result<Scene> {
    cfg.validate()?;
    if let Some(bad) = layout
        .objects
        .iter()
        .chain(&layout.distractors)
        .find(|g| g.class >= cfg.num_classes)
    {
        return Err(invalid(
            "class",
            alloc::format!(
                "class id {} out of range for {} classes",
                bad.class,
                cfg.num_classes
            ),
        ));
    }
    let k = cfg.num_classes;
    let dim = cfg.feature_dim();
    let visible: Vec<BBox> = layout
        .objects
        .iter()
        .chain(&layout.distractors)
        .map(|g| g.bbox)
        .collect();
    let obj_boxes: Vec<BBox> = layout.objects.iter().map(|g| g.bbox).collect();
    let dis_boxes: Vec<BBox> = layout.distractors.iter().map(|g| g.bbox).collect();
    let obj_iou = iou_matrix(&anchors.boxes, &obj_boxes);
    let dis_iou = iou_matrix(&anchors.boxes, &dis_boxes);

    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    rng.set_stream(FEATURE_STREAM);
    let mut features: Vec<f64> = alloc::vec![0.0; anchors.len() * dim];
    for (a, anchor) in anchors.boxes.iter().enumerate() {
        let row = &mut features[a * dim..(a + 1) * dim];
        for (j, g) in layout.objects.iter().enumerate() {
            let v =
                obj_iou.get(a, j) * (1.0 - cfg.occlusion * occluded(anchor, &g.bbox, &dis_boxes));
            row[g.class] = row[g.class].max(v);
        }
        for (j, g) in layout.distractors.iter().enumerate() {
            row[k + g.class] = row[k + g.class].max(dis_iou.get(a, j));
        }
        let mut blend = [0.0; 4];
        let mut total = 0.0;
        let (cx, cy) = anchor.center();
        let field = BBox::from_center(
            cx,
            cy,
            anchor.width() * cfg.receptive_field,
            anchor.height() * cfg.receptive_field,
        );
        for b in &visible {
            let v = iou(anchor, b);
            let Some(seen) = b.intersection(&field) else {
                continue;
            };
            if v > 0.0 {
                let w = math::powf(v, cfg.blend_power);
                let d = encode(anchor, &seen)?.to_array();
                for (acc, x) in blend.iter_mut().zip(d) {
                    *acc += w * x;
                }
                total += w;
            }
        }
        if total > 0.0 {
            for (slot, acc) in row[2 * k..].iter_mut().zip(blend) {
                *slot = acc / total;
            }
        }
        if cfg.feature_noise > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += cfg.feature_noise * z;
            }
        }
    }
    Ok(Scene {
        layout: layout.clone(),
        feature_dim: dim,
        features,
    })
}

pub fn generate_scene(cfg: &GenConfig, anchors: &AnchorSet, seed: u64) -> Result<Scene> {
    let layout = generate_layout(cfg, anchors.image_width, anchors.image_height, seed)?;
    scene_features(cfg, anchors, &layout)
}

/// `n` scenes seeded `base_seed + i`.
pub fn generate_split(
    cfg: &GenConfig,
    anchors: &AnchorSet,
    base_seed: u64,
    n: usize,
) -> Result<Vec<Scene>> {
    (0..n as u64)
        .map(|i| generate_scene(cfg, anchors, base_seed.wrapping_add(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{generate, AnchorConfig};
    use crate::geometry::iou_matrix;

    fn anchors() -> AnchorSet {
        generate(&AnchorConfig::default()).unwrap()
    }

    #[test]
    fn noiseless_iou_channel_matches_assignment_iou() {
        let cfg = GenConfig {
            feature_noise: 0.0,
            distractor_rate: 0.0,
            ..GenConfig::default()
        };
        let set = anchors();
        let scene = generate_scene(&cfg, &set, 11).unwrap();
        let ious = iou_matrix(&set.boxes, &scene.gt_boxes());
        for a in 0..set.len() {
            for (j, g) in scene.objects().iter().enumerate() {
                let best = (0..scene.objects().len())
                    .filter(|&m| scene.objects()[m].class == g.class)
                    .map(|m| ious.get(a, m))
                    .fold(0.0, f64::max);
                assert_eq!(scene.feature_row(a)[g.class], best, "anchor {a} gt {j}");
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let set = anchors();
        let cfg = GenConfig::default();
        assert_eq!(
            generate_scene(&cfg, &set, 5).unwrap(),
            generate_scene(&cfg, &set, 5).unwrap()
        );
        assert_ne!(
            generate_scene(&cfg, &set, 5).unwrap(),
            generate_scene(&cfg, &set, 6).unwrap()
        );
    }

    #[test]
    fn one_object_per_scene_counts() {
        let cfg = GenConfig {
            objects_per_scene: (1, 1),
            ..GenConfig::default()
        };
        let split = generate_split(&cfg, &anchors(), 1000, 100).unwrap();
        assert_eq!(split.iter().map(|s| s.objects().len()).sum::<usize>(), 100);
        assert!(generate_split(&cfg, &anchors(), 0, 0).unwrap().is_empty());
    }

    #[test]
    fn objects_stay_inside_the_image() {
        let set = anchors();
        for s in generate_split(&GenConfig::default(), &set, 77, 50).unwrap() {
            for g in s.objects().iter().chain(&s.layout.distractors) {
                let b = g.bbox;
                assert!(b.has_positive_area());
                assert!(
                    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0,
                    "{b:?}"
                );
            }
        }
    }

    #[test]
    fn features_regenerate_from_layout() {
        let set = anchors();
        let cfg = GenConfig::default();
        let scene = generate_scene(&cfg, &set, 3).unwrap();
        assert_eq!(scene_features(&cfg, &set, &scene.layout).unwrap(), scene);
    }

    #[test]
    fn infeasible_layout_names_the_constraint() {
        let cfg = GenConfig {
            objects_per_scene: (30, 30),
            size_range: (100.0, 120.0),
            overlap_rate: 0.0,
            max_retries: 20,
            ..GenConfig::default()
        };
        let err = generate_scene(&cfg, &anchors(), 1).unwrap_err();
        assert_eq!(
            err,
            Error::InfeasiblePlacement {
                constraint: "object separation",
                retries: 20
            }
        );
    }
}
