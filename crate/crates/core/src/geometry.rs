//! Axis-aligned boxes in pixel space and on integer grids.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Corner-form box `[x1, y1, x2, y2]` in continuous pixel coordinates.
///
/// Pixel `(x, y)` covers the unit square `[x, x+1) × [y, y+1)`, so the box
/// of a single pixel at the origin is `[0, 0, 1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Converts a COCO-style `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    /// Finite coordinates with strictly positive extent on both axes.
    pub fn is_well_formed(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Columns of the pixels whose centres fall inside the box, clipped to `[0, limit)`.
    pub fn col_span(&self, limit: usize) -> Range<usize> {
        pixel_span(self.x1, self.x2, limit)
    }

    pub fn row_span(&self, limit: usize) -> Range<usize> {
        pixel_span(self.y1, self.y2, limit)
    }
}

/// Intersection over union of two boxes, computed on real-valued areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Integer indices `i` with pixel centre `i + 0.5` in `[lo, hi)`, clipped to `[0, limit)`.
pub fn pixel_span(lo: f64, hi: f64, limit: usize) -> Range<usize> {
    let clip = |v: f64| -> usize {
        let c = (v - 0.5).ceil();
        if c <= 0.0 {
            0
        } else if c >= limit as f64 {
            limit
        } else {
            c as usize
        }
    };
    let start = clip(lo);
    let end = clip(hi).max(start);
    start..end
}

/// Half-open box of integer cells `[x1, x2) × [y1, y2)` on a latent or pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct CellBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl From<[usize; 4]> for CellBox {
    fn from(v: [usize; 4]) -> Self {
        CellBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
    }
}

impl From<CellBox> for [usize; 4] {
    fn from(b: CellBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl CellBox {
    pub const fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        CellBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> usize {
        self.x2.saturating_sub(self.x1)
    }

    pub fn height(&self) -> usize {
        self.y2.saturating_sub(self.y1)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Covering projection of a pixel box onto a grid downscaled by `factor`:
    /// floor on the min corner, ceil on the max corner, clamped to the grid.
    pub fn covering(b: &BBox, factor: usize, grid_w: usize, grid_h: usize) -> CellBox {
        let f = factor as f64;
        let lo = |v: f64, lim: usize| ((v / f).floor().max(0.0) as usize).min(lim);
        let hi = |v: f64, lim: usize| ((v / f).ceil().max(0.0) as usize).min(lim);
        CellBox::new(lo(b.x1, grid_w), lo(b.y1, grid_h), hi(b.x2, grid_w), hi(b.y2, grid_h))
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts unit pixels covered by each box on an integer lattice.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..128 {
            for x in 0..128 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let ia = a.contains_point(cx, cy);
                let ib = b.contains_point(cx, cy);
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        let oracle = raster_iou(&a, &b);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - oracle).abs() < 1e-6);
    }

    #[test]
    fn touching_boxes_are_disjoint() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn covering_projection() {
        let b = BBox::new(16.0, 16.0, 48.0, 48.0);
        assert_eq!(CellBox::covering(&b, 8, 64, 64), CellBox::new(2, 2, 6, 6));
        let b = BBox::new(17.0, 9.5, 47.0, 500.0);
        assert_eq!(CellBox::covering(&b, 8, 64, 64), CellBox::new(2, 1, 6, 63));
    }

    #[test]
    fn pixel_span_centres() {
        assert_eq!(pixel_span(10.0, 50.0, 512), 10..50);
        assert_eq!(pixel_span(10.4, 10.6, 512), 10..11);
        assert_eq!(pixel_span(10.6, 11.4, 512), 11..11);
        assert_eq!(pixel_span(-5.0, 700.0, 512), 0..512);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0u32..60, 0u32..60, 1u32..30, 1u32..30)
                .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = iou(&a, &b);
                prop_assert_eq!(ab, iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(iou(&a, &a), 1.0);
            }

            #[test]
            fn iou_matches_raster_on_integer_boxes(a in arb_box(), b in arb_box()) {
                prop_assert!((iou(&a, &b) - super::raster_iou(&a, &b)).abs() < 1e-6);
            }
        }
    }
}
