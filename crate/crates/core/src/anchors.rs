// SPDX-License-Identifier: Apache-2.0

//! Fixed per-image anchor grids.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::math;

/// One pyramid level: anchors are tiled every `stride` pixels with a nominal
/// side length of `base_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AnchorLevel {
    pub stride: f64,
    pub base_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AnchorConfig {
    pub levels: Vec<AnchorLevel>,
    /// Width over height.
    pub aspect_ratios: Vec<f64>,
    pub scale_octaves: Vec<f64>,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            levels: alloc::vec![
                AnchorLevel {
                    stride: 8.0,
                    base_size: 32.0,
                },
                AnchorLevel {
                    stride: 16.0,
                    base_size: 64.0,
                },
            ],
            aspect_ratios: alloc::vec![0.5, 1.0, 2.0],
            scale_octaves: alloc::vec![1.0, 1.259_921_049_894_873_2, 1.587_401_051_968_199_4],
            image_width: 128.0,
            image_height: 128.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidAnchorConfig(msg.into()));
        if self.levels.is_empty() {
            return bad("at least one level is required");
        }
        if self.aspect_ratios.is_empty() || self.scale_octaves.is_empty() {
            return bad("aspect_ratios and scale_octaves must be non-empty");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self
            .levels
            .iter()
            .all(|l| positive(l.stride) && positive(l.base_size))
        {
            return bad("strides and base sizes must be positive");
        }
        if !self.aspect_ratios.iter().all(|&r| positive(r))
            || !self.scale_octaves.iter().all(|&o| positive(o))
        {
            return bad("aspect ratios and octaves must be positive");
        }
        if !(self.image_width.is_finite() && self.image_width >= 0.0)
            || !(self.image_height.is_finite() && self.image_height >= 0.0)
        {
            return bad("image dimensions must be finite and non-negative");
        }
        Ok(())
    }

    fn grid(&self, stride: f64) -> (usize, usize) {
        let cols = libm::ceil(self.image_width / stride) as usize;
        let rows = libm::ceil(self.image_height / stride) as usize;
        (cols, rows)
    }

    /// Number of anchors [`generate`] will emit.
    pub fn anchor_count(&self) -> usize {
        let per_cell = self.aspect_ratios.len() * self.scale_octaves.len();
        self.levels
            .iter()
            .map(|l| {
                let (c, r) = self.grid(l.stride);
                c * r * per_cell
            })
            .sum()
    }
}

/// Ordered anchors: level-major, then row-major grid cells, then aspect ratio,
/// then octave.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub level_of: Vec<usize>,
    pub image_width: f64,
    pub image_height: f64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tile anchors over the image. Anchors are not clipped to the image.
///
/// Shapes are area-preserving: for a side `s = base * octave` and ratio `r`,
/// `w = s * sqrt(r)` and `h = s / sqrt(r)`.
pub fn generate(config: &AnchorConfig) -> Result<AnchorSet> {
    config.validate()?;
    let count = config.anchor_count();
    let mut boxes = Vec::with_capacity(count);
    let mut level_of = Vec::with_capacity(count);
    for (li, level) in config.levels.iter().enumerate() {
        let shapes: Vec<(f64, f64)> = config
            .aspect_ratios
            .iter()
            .flat_map(|&ratio| {
                let root = math::sqrt(ratio);
                config.scale_octaves.iter().map(move |&oct| {
                    let side = level.base_size * oct;
                    (side * root, side / root)
                })
            })
            .collect();
        let (cols, rows) = config.grid(level.stride);
        for row in 0..rows {
            let cy = (row as f64 + 0.5) * level.stride;
            for col in 0..cols {
                let cx = (col as f64 + 0.5) * level.stride;
                for &(w, h) in &shapes {
                    boxes.push(BBox::from_center(cx, cy, w, h));
                    level_of.push(li);
                }
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        level_of,
        image_width: config.image_width,
        image_height: config.image_height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(stride: f64, base: f64, ratios: Vec<f64>, w: f64, h: f64) -> AnchorConfig {
        AnchorConfig {
            levels: vec![AnchorLevel {
                stride,
                base_size: base,
            }],
            aspect_ratios: ratios,
            scale_octaves: vec![1.0],
            image_width: w,
            image_height: h,
        }
    }

    #[test]
    fn two_by_two_grid() {
        let set = generate(&single(8.0, 8.0, vec![1.0], 16.0, 16.0)).unwrap();
        let centers: Vec<(f64, f64)> = set.boxes.iter().map(|b| b.center()).collect();
        assert_eq!(
            centers,
            vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]
        );
        for b in &set.boxes {
            assert_eq!((b.width(), b.height()), (8.0, 8.0));
        }
    }

    #[test]
    fn aspect_ratio_preserves_area() {
        let set = generate(&single(8.0, 8.0, vec![2.0], 8.0, 8.0)).unwrap();
        let b = set.boxes[0];
        assert!((b.width() / b.height() - 2.0).abs() < 1e-9);
        assert!((b.area() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn empty_image_has_no_anchors() {
        let set = generate(&single(8.0, 8.0, vec![1.0], 0.0, 0.0)).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn empty_levels_is_an_error() {
        let mut cfg = AnchorConfig::default();
        cfg.levels.clear();
        assert!(matches!(generate(&cfg), Err(Error::InvalidAnchorConfig(_))));
        let mut cfg = AnchorConfig::default();
        cfg.aspect_ratios[1] = -1.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn partial_border_cells_emit_anchors() {
        let set = generate(&single(8.0, 8.0, vec![1.0], 17.0, 9.0)).unwrap();
        assert_eq!(set.len(), 3 * 2);
    }

    #[test]
    fn default_config_matches_count_formula_and_area() {
        let cfg = AnchorConfig::default();
        let set = generate(&cfg).unwrap();
        assert_eq!(set.len(), 16 * 16 * 9 + 8 * 8 * 9);
        assert_eq!(set.len(), cfg.anchor_count());
        assert_eq!(set, generate(&cfg).unwrap());
        for (i, b) in set.boxes.iter().enumerate() {
            let level = cfg.levels[set.level_of[i]];
            let octave = cfg.scale_octaves[i % cfg.scale_octaves.len()];
            let want = (level.base_size * octave) * (level.base_size * octave);
            assert!(b.has_positive_area());
            assert!((b.area() - want).abs() <= 1e-6 * want);
        }
    }
}
