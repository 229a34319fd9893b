// SPDX-License-Identifier: Apache-2.0

//! On-disk formats.
//!
//! **Scenes** are JSON Lines, one layout per line:
//!
//! ```json
//! {"schema_version":1,"width":128.0,"height":128.0,"seed":7,
//!  "objects":[{"box":{"x1":..,"y1":..,"x2":..,"y2":..},"class":0}],
//!  "distractors":[]}
//! ```
//!
//! Features are not stored; [`read_scenes`] regenerates them from the layout
//! and its seed.
//!
//! **Checkpoints** are a flat little-endian binary file:
//!
//! | offset | type        | field                          |
//! |--------|-------------|--------------------------------|
//! | 0      | `[u8; 4]`   | magic `NACK`                   |
//! | 4      | `u32`       | format version (1)             |
//! | 8      | `u32`       | feature_dim                    |
//! | 12     | `u32`       | num_classes                    |
//! | 16     | `u32`       | hidden width (0 = linear head) |
//! | 20     | `u32`       | reserved, 0                    |
//! | 24     | `u64`       | training iteration             |
//! | 32     | `u64`       | number of values `n`           |
//! | 40     | `[f64; n]`  | parameters, flat               |
//!
//! The parameter order is the one used by `HeadParams::values`: optional
//! hidden weights (row-major, `feature_dim x hidden`), hidden biases, output
//! weights (row-major, `inputs x (num_classes + 4)`), output biases.
//!
//! **Evaluation CSV** has columns `schema_version,iou_threshold,ap`, one row
//! per threshold. **PR CSV** has `schema_version,label,iou_threshold,recall,precision`,
//! one row per (threshold, recall point).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};

use anyhow::{bail, ensure, Context, Result};
use noisy_anchors_core::anchors::{self, AnchorConfig, AnchorSet};
use noisy_anchors_core::assignment::{assign_hard_with, select_positives_with};
use noisy_anchors_core::geometry::iou_matrix;
use noisy_anchors_core::model::{HeadParams, HeadShape};
use noisy_anchors_core::synth::{scene_features, GroundTruth, Layout};
use noisy_anchors_core::{AssignParams, BBox, EvalReport, GenConfig, HardLabel, Scene};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NACK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER: usize = 40;

#[derive(Serialize, Deserialize)]
// flatten cannot be combined with deny_unknown_fields
struct SceneRecord {
    schema_version: u32,
    #[serde(flatten)]
    layout: Layout,
}

pub fn write_scenes<W: Write>(mut w: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        let rec = SceneRecord {
            schema_version: SCHEMA_VERSION,
            layout: s.layout.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_layouts<R: BufRead>(r: R) -> Result<Vec<Layout>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .with_context(|| format!("scene record on line {}", i + 1))?;
        ensure!(
            rec.schema_version == SCHEMA_VERSION,
            "line {}: unsupported schema_version {}",
            i + 1,
            rec.schema_version
        );
        out.push(rec.layout);
    }
    Ok(out)
}

/// Read layouts and regenerate their features.
pub fn read_scenes<R: BufRead>(r: R, cfg: &GenConfig, anchors: &AnchorSet) -> Result<Vec<Scene>> {
    read_layouts(r)?
        .iter()
        .map(|l| scene_features(cfg, anchors, l).map_err(Into::into))
        .collect()
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &HeadParams, iteration: u64) -> Result<()> {
    let s = params.shape;
    let dim = |v: usize, name: &str| {
        u32::try_from(v).with_context(|| format!("{name} does not fit in u32"))
    };
    let mut buf = Vec::with_capacity(CHECKPOINT_HEADER + 8 * params.values.len());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim(s.feature_dim, "feature_dim")?.to_le_bytes());
    buf.extend_from_slice(&dim(s.num_classes, "num_classes")?.to_le_bytes());
    buf.extend_from_slice(&dim(s.hidden, "hidden")?.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns the parameters and the stored iteration.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(HeadParams, u64)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    ensure!(
        buf.len() >= CHECKPOINT_HEADER,
        "checkpoint truncated: {} bytes",
        buf.len()
    );
    ensure!(buf[..4] == CHECKPOINT_MAGIC, "not a checkpoint (bad magic)");
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    ensure!(
        version == CHECKPOINT_VERSION,
        "unsupported checkpoint version {version}"
    );
    let shape = HeadShape {
        feature_dim: u32_at(8) as usize,
        num_classes: u32_at(12) as usize,
        hidden: u32_at(16) as usize,
    };
    let iteration = u64_at(24);
    let n = u64_at(32) as usize;
    ensure!(
        n == shape.num_params(),
        "checkpoint holds {n} values, shape needs {}",
        shape.num_params()
    );
    ensure!(
        buf.len() == CHECKPOINT_HEADER + 8 * n,
        "checkpoint length {} does not match {n} values",
        buf.len()
    );
    let values = buf[CHECKPOINT_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((HeadParams { shape, values }, iteration))
}

pub fn eval_report_json(report: &EvalReport) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        schema_version: u32,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    serde_json::to_string_pretty(&Doc {
        schema_version: SCHEMA_VERSION,
        report,
    })
    .expect("reports serialize")
}

pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from("schema_version,iou_threshold,ap\n");
    for (t, ap) in report.iou_thresholds.iter().zip(&report.ap) {
        writeln!(out, "{SCHEMA_VERSION},{t:.2},{ap}").expect("write to string");
    }
    out
}

pub const PR_CSV_HEADER: &str = "schema_version,label,iou_threshold,recall,precision\n";

/// PR samples of one report; no header.
pub fn pr_rows(label: &str, report: &EvalReport) -> String {
    let mut out = String::new();
    for (t, curve) in report.iou_thresholds.iter().zip(&report.precision) {
        for (r, p) in report.recall_grid.iter().zip(curve) {
            writeln!(out, "{SCHEMA_VERSION},{label},{t:.2},{r:.2},{p}").expect("write to string");
        }
    }
    out
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

/// Annotated image from a COCO-style file.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoScene {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<GroundTruth>,
}

/// Minimal COCO ingestion: `images` (id, width, height) and `annotations`
/// (image_id, bbox `[x, y, w, h]`, category_id; crowd boxes skipped).
/// Category ids are mapped to contiguous class indices in ascending order.
/// Returns the scenes sorted by image id and the category id of each class.
pub fn read_coco<R: Read>(r: R) -> Result<(Vec<CocoScene>, Vec<u64>)> {
    let file: CocoFile = serde_json::from_reader(r).context("COCO annotation file")?;
    let mut cats: Vec<u64> = file.annotations.iter().map(|a| a.category_id).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut scenes: BTreeMap<u64, CocoScene> = BTreeMap::new();
    for im in &file.images {
        ensure!(
            im.width > 0.0 && im.height > 0.0,
            "image {}: non-positive size",
            im.id
        );
        let prev = scenes.insert(
            im.id,
            CocoScene {
                image_id: im.id,
                width: im.width,
                height: im.height,
                objects: Vec::new(),
            },
        );
        ensure!(prev.is_none(), "duplicate image id {}", im.id);
    }
    for (i, a) in file.annotations.iter().enumerate() {
        if a.iscrowd != 0 {
            continue;
        }
        let [x, y, w, h] = a.bbox;
        let bbox = BBox::new(x, y, x + w, y + h);
        if !bbox.has_positive_area() {
            bail!("annotation {i}: degenerate bbox {:?}", a.bbox);
        }
        let Some(scene) = scenes.get_mut(&a.image_id) else {
            bail!("annotation {i}: unknown image id {}", a.image_id);
        };
        let class = cats
            .binary_search(&a.category_id)
            .expect("category collected above");
        scene.objects.push(GroundTruth { bbox, class });
    }
    Ok((scenes.into_values().collect(), cats))
}

/// How the two label assignments treat one set of annotations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentAudit {
    pub schema_version: u32,
    pub images: usize,
    pub objects: usize,
    pub anchors_per_image: f64,
    /// IoU-threshold assignment.
    pub hard_positives: usize,
    pub hard_ignored: usize,
    /// Objects no anchor reaches with IoU >= fg_threshold.
    pub objects_without_hard_positive: usize,
    /// Top-N assignment.
    pub topn_positives: usize,
    pub topn_mean_iou: Option<f64>,
    /// Top-N positives that the IoU rule would call background.
    pub topn_below_bg_threshold: usize,
    /// Top-N positives that overlap an object other than their own at
    /// IoU >= bg_threshold.
    pub topn_ambiguous: usize,
}

/// Compare hard and top-N assignments on annotated images. Anchors are tiled
/// per image with `anchor_cfg`'s levels, ratios and octaves.
pub fn audit_assignment(
    scenes: &[CocoScene],
    anchor_cfg: &AnchorConfig,
    params: &AssignParams,
) -> Result<AssignmentAudit> {
    let mut a = AssignmentAudit {
        schema_version: SCHEMA_VERSION,
        images: scenes.len(),
        objects: 0,
        anchors_per_image: 0.0,
        hard_positives: 0,
        hard_ignored: 0,
        objects_without_hard_positive: 0,
        topn_positives: 0,
        topn_mean_iou: None,
        topn_below_bg_threshold: 0,
        topn_ambiguous: 0,
    };
    let mut iou_sum = 0.0;
    let mut anchor_total = 0usize;
    for s in scenes {
        let cfg = AnchorConfig {
            image_width: s.width,
            image_height: s.height,
            ..anchor_cfg.clone()
        };
        let set = anchors::generate(&cfg)?;
        anchor_total += set.len();
        let gts: Vec<BBox> = s.objects.iter().map(|o| o.bbox).collect();
        a.objects += gts.len();
        let ious = iou_matrix(&set.boxes, &gts);
        let hard = assign_hard_with(&ious, params);
        let mut covered = vec![false; gts.len()];
        for (label, m) in hard.labels.iter().zip(&hard.matched) {
            match label {
                HardLabel::Foreground => {
                    a.hard_positives += 1;
                    if let Some(g) = m {
                        covered[*g] = true;
                    }
                }
                HardLabel::Ignored => a.hard_ignored += 1,
                HardLabel::Background => {}
            }
        }
        a.objects_without_hard_positive += covered.iter().filter(|c| !**c).count();
        for (&anchor, &g) in &select_positives_with(&ious, params.num_positives, params.min_pos_iou)
        {
            let v = ious.get(anchor, g);
            a.topn_positives += 1;
            iou_sum += v;
            if v < params.bg_threshold {
                a.topn_below_bg_threshold += 1;
            }
            if (0..gts.len()).any(|o| o != g && ious.get(anchor, o) >= params.bg_threshold) {
                a.topn_ambiguous += 1;
            }
        }
    }
    if a.topn_positives > 0 {
        a.topn_mean_iou = Some(iou_sum / a.topn_positives as f64);
    }
    if !scenes.is_empty() {
        a.anchors_per_image = anchor_total as f64 / scenes.len() as f64;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use noisy_anchors_core::synth::generate_split;

    #[test]
    fn checkpoint_round_trip() {
        let shape = HeadShape {
            feature_dim: 4,
            num_classes: 2,
            hidden: 3,
        };
        let p = HeadParams::init(shape, 0.01, 0.3, 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, 42).unwrap();
        assert_eq!(&buf[..4], b"NACK");
        assert_eq!(buf.len(), 40 + 8 * shape.num_params());
        let (back, it) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, p);
        assert_eq!(it, 42);
        buf.pop();
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn scenes_round_trip_with_regenerated_features() {
        let cfg = GenConfig::default();
        let set = anchors::generate(&AnchorConfig::default()).unwrap();
        let scenes = generate_split(&cfg, &set, 100, 3).unwrap();
        let mut buf = Vec::new();
        write_scenes(&mut buf, &scenes).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        let back = read_scenes(&buf[..], &cfg, &set).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn coco_ingestion_and_audit() {
        let doc = r#"{
            "images": [{"id": 2, "width": 64, "height": 64}, {"id": 1, "width": 64, "height": 64}],
            "annotations": [
                {"image_id": 1, "bbox": [8, 8, 24, 24], "category_id": 18},
                {"image_id": 1, "bbox": [30, 30, 20, 16], "category_id": 3},
                {"image_id": 2, "bbox": [0, 0, 10, 10], "category_id": 3, "iscrowd": 1}
            ],
            "categories": [{"id": 3, "name": "a"}, {"id": 18, "name": "b"}]
        }"#;
        let (scenes, cats) = read_coco(doc.as_bytes()).unwrap();
        assert_eq!(cats, vec![3, 18]);
        assert_eq!(scenes[0].image_id, 1);
        assert_eq!(scenes[0].objects.len(), 2);
        assert_eq!(scenes[0].objects[0].class, 1);
        assert!(scenes[1].objects.is_empty());
        let audit =
            audit_assignment(&scenes, &AnchorConfig::default(), &AssignParams::default()).unwrap();
        assert_eq!(audit.objects, 2);
        assert_eq!(audit.topn_positives, 60);
        assert!(audit.topn_mean_iou.unwrap() > 0.0);
    }

    #[test]
    fn csv_shapes() {
        let report = noisy_anchors_core::eval::evaluate(&[], &[vec![]], &[vec![]], 0.02).unwrap();
        assert_eq!(eval_report_csv(&report).lines().count(), 11);
        assert_eq!(pr_rows("x", &report).lines().count(), 101 * 10);
    }
}
