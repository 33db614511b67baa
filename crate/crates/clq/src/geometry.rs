//! Boxes, overlap measures, anchor generation and box delta coding.
//!
//! Everything else in the crate is built on these: losses supervise IoU
//! values, the assigner thresholds on them, NMS suppresses by them and
//! the evaluator matches by them.

use crate::error::{Error, Result};

/// Axis-aligned rectangle in corner form, continuous pixel coordinates.
///
/// Degenerate (zero-area) boxes are representable; negative extents are
/// rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite())
            || x2 < x1
            || y2 < y1
        {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }
}

/// Intersection over union. Degenerate boxes yield 0 (zero-area union
/// counts as no overlap).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (|C| - |A∪B|) / |C|` with `C` the smallest
/// enclosing box. Requires positive-area inputs; a degenerate box is not
/// a usable regression target.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::DegenerateBox {
            role: "giou operand",
        });
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    Ok(inter / union - (enclose - union) / enclose)
}

/// Center/log-size box parameterization relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

/// Upper clamp applied to dw/dh before exponentiation during decode.
#[inline]
pub fn max_log_ratio() -> f64 {
    (1000.0 / 16.0f64).ln()
}

/// Encode `target` relative to `anchor` as (dx, dy, dw, dh).
pub fn encode_box(anchor: &BBox, target: &BBox) -> Result<BoxDeltas> {
    if anchor.area() <= 0.0 {
        return Err(Error::DegenerateBox { role: "anchor" });
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoxDeltas {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    })
}

/// Invert [`encode_box`]. dw/dh are clamped to [`max_log_ratio`] before
/// exponentiation so a wild regression output cannot overflow.
pub fn decode_box(anchor: &BBox, deltas: &BoxDeltas) -> Result<BBox> {
    if anchor.area() <= 0.0 {
        return Err(Error::DegenerateBox { role: "anchor" });
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + deltas.dx * aw;
    let cy = acy + deltas.dy * ah;
    let clamp = max_log_ratio();
    let w = aw * deltas.dw.min(clamp).exp();
    let h = ah * deltas.dh.min(clamp).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// One pyramid level of anchors, one anchor per feature point, row-major.
#[derive(Debug, Clone)]
pub struct AnchorLevel {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub anchors: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    /// All anchors in level-major, row-major order.
    pub fn iter_all(&self) -> impl Iterator<Item = &BBox> {
        self.levels.iter().flat_map(|l| l.anchors.iter())
    }

    /// Flat offset of the first anchor of each level.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.levels.len());
        let mut acc = 0;
        for l in &self.levels {
            offsets.push(acc);
            acc += l.anchors.len();
        }
        offsets
    }
}

/// One square anchor per feature point, side `scale_factor * stride`,
/// centered at the cell center `((c+0.5)*stride, (r+0.5)*stride)`.
pub fn generate_anchors(
    image_size: usize,
    level_strides: &[usize],
    scale_factor: f64,
) -> Result<AnchorGrid> {
    let mut levels = Vec::with_capacity(level_strides.len());
    for &stride in level_strides {
        if stride == 0 || !image_size.is_multiple_of(stride) {
            return Err(Error::StrideMismatch { stride, image_size });
        }
        let cells = image_size / stride;
        let side = scale_factor * stride as f64;
        let mut anchors = Vec::with_capacity(cells * cells);
        for r in 0..cells {
            for c in 0..cells {
                let cx = (c as f64 + 0.5) * stride as f64;
                let cy = (r as f64 + 0.5) * stride as f64;
                anchors.push(BBox {
                    x1: cx - 0.5 * side,
                    y1: cy - 0.5 * side,
                    x2: cx + 0.5 * side,
                    y2: cy + 0.5 * side,
                });
            }
        }
        levels.push(AnchorLevel {
            stride,
            height: cells,
            width: cells,
            anchors,
        });
    }
    Ok(AnchorGrid { levels })
}
