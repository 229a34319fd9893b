// SPDX-License-Identifier: Apache-2.0

//! Axis-aligned box arithmetic in continuous corner coordinates.
//!
//! Boxes are `(x1, y1, x2, y2)` with no `+1` pixel convention, so the width of
//! a box is simply `x2 - x1`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Upper bound applied to `dw`/`dh` before exponentiation in [`decode`].
pub const DELTA_SIZE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Axis-aligned rectangle, `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Ordered corners and finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Overlapping region, if it has positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        );
        b.has_positive_area().then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Regression target relative to an anchor: centre shift normalised by the
/// anchor size and log-scale size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Intersection over union. Returns 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Dense row-major `rows x cols` matrix of IoU values.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IouMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Largest entry of a row with its column, lowest column on ties.
    /// `None` for a matrix without columns.
    pub fn row_argmax(&self, row: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (j, &v) in self.row(row).iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((j, v)),
            }
        }
        best
    }
}

/// Pairwise IoU between every anchor (rows) and every ground-truth box (columns).
pub fn iou_matrix(anchors: &[BBox], gts: &[BBox]) -> IouMatrix {
    let mut data = Vec::with_capacity(anchors.len() * gts.len());
    for a in anchors {
        data.extend(gts.iter().map(|g| iou(a, g)));
    }
    IouMatrix {
        rows: anchors.len(),
        cols: gts.len(),
        data,
    }
}

fn require_positive(b: &BBox) -> Result<()> {
    if b.has_positive_area() && b.is_valid() {
        Ok(())
    } else {
        Err(Error::DegenerateBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        })
    }
}

/// Regression delta that maps `anchor` onto `target`.
///
/// Both boxes need positive area; the log-size terms are undefined otherwise.
pub fn encode(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    require_positive(anchor)?;
    require_positive(target)?;
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDelta {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: math::ln(target.width() / aw),
        dh: math::ln(target.height() / ah),
    })
}

/// Apply a regression delta to an anchor.
///
/// Written in corner form so that a zero delta returns the anchor bit for bit:
/// `x1' = x1 + dx*w - w*(exp(dw) - 1)/2`.
pub fn decode(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    require_positive(anchor)?;
    Ok(decode_unchecked(anchor, delta))
}

pub(crate) fn decode_unchecked(anchor: &BBox, delta: &BoxDelta) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let grow_w = 0.5 * aw * math::expm1(delta.dw.min(DELTA_SIZE_CLAMP));
    let grow_h = 0.5 * ah * math::expm1(delta.dh.min(DELTA_SIZE_CLAMP));
    let shift_x = delta.dx * aw;
    let shift_y = delta.dy * ah;
    BBox {
        x1: anchor.x1 + shift_x - grow_w,
        y1: anchor.y1 + shift_y - grow_h,
        x2: anchor.x2 + shift_x + grow_w,
        y2: anchor.y2 + shift_y + grow_h,
    }
}
