//! Cross-attention refinement of generated-item boxes.
//!
//! For every generated entity the averaged cross-attention map is segmented
//! inside its grounding box to find the most class-discriminative region.
//! Point prompts are sampled from that region (median point sampling, or the
//! top-k baseline), combined with the grounding box, and used to segment the
//! generated image. The tight box of the returned mask becomes the annotation.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, SegmentMode, SegmentRequest, SegmenterBackend};
use crate::engine::AttentionRecord;
use crate::geometry::BBox;
use crate::grounding::tight_bbox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Polarity {
    Foreground,
    Background,
}

/// Point prompt at a pixel centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub polarity: Polarity,
}

impl PointPrompt {
    fn at(p: Scored, polarity: Polarity) -> Self {
        PointPrompt { x: p.x as f64 + 0.5, y: p.y as f64 + 0.5, polarity }
    }

    pub fn pixel(&self) -> (usize, usize) {
        (self.x.floor() as usize, self.y.floor() as usize)
    }
}

/// Points plus the grounding box, as sent to a promptable segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub points: Vec<PointPrompt>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativeRegion {
    /// `H × W` binary mask, a subset of the source box.
    pub mask: Tensor,
    pub source_box: BBox,
    /// The whole box interior was used because the map or the segmentation was empty.
    pub fallback: bool,
}

impl DiscriminativeRegion {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.mask.at2(y, x) > 0.5
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// A pixel and its activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub x: usize,
    pub y: usize,
    pub value: f32,
}

/// Ascending by activation, ties by row-major position.
fn key_order(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    a.value.total_cmp(&b.value).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x))
}

/// Lower median under the `(activation, row-major)` order.
pub fn median_point(values: &[Scored]) -> Option<Scored> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(key_order);
    Some(v[(v.len() - 1) / 2])
}

fn box_mask(bbox: &BBox, h: usize, w: usize) -> Tensor {
    let (cols, rows) = (bbox.col_span(w), bbox.row_span(h));
    Tensor::from_fn2(h, w, |y, x| (rows.contains(&y) && cols.contains(&x)) as u8 as f32)
}

/// Segments the attention map inside `bbox` to locate the item's core region.
pub fn discriminative_region(
    map: &AttentionRecord,
    bbox: &BBox,
    segmenter: &dyn SegmenterBackend,
) -> Result<DiscriminativeRegion, BackendError> {
    let (h, w) = (map.map.dims()[0], map.map.dims()[1]);
    let full = || DiscriminativeRegion { mask: box_mask(bbox, h, w), source_box: *bbox, fallback: true };
    if map.degenerate {
        return Ok(full());
    }
    let image = map.map.clone().reshape(vec![h, w, 1])?;
    let req = SegmentRequest {
        image,
        mode: SegmentMode::Prompt,
        scene: None,
        prompt: Some(PromptSet { points: Vec::new(), bbox: *bbox }),
    };
    let seg = segmenter.segment(&req)?;
    let Some(m) = seg.masks.into_iter().next() else {
        return Ok(full());
    };
    let inside = box_mask(bbox, h, w);
    let data: Vec<f32> =
        m.mask.data().iter().zip(inside.data()).map(|(&a, &b)| (a > 0.5 && b > 0.5) as u8 as f32).collect();
    if data.iter().all(|&v| v == 0.0) {
        return Ok(full());
    }
    Ok(DiscriminativeRegion { mask: Tensor::new(vec![h, w], data)?, source_box: *bbox, fallback: false })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSample {
    pub points: Vec<PointPrompt>,
    /// Some branch ran out of pixels before the requested depth.
    pub truncated: bool,
    /// No pixel inside the box lies outside the region.
    pub missing_background: bool,
}

fn region_values(region: &DiscriminativeRegion, map: &AttentionRecord) -> Vec<Scored> {
    let (h, w) = (map.map.dims()[0], map.map.dims()[1]);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if region.contains(x, y) {
                out.push(Scored { x, y, value: map.map.at2(y, x) });
            }
        }
    }
    out
}

/// Minimum-activation pixel inside the grounding box but outside the region.
fn background_point(region: &DiscriminativeRegion, map: &AttentionRecord) -> Option<Scored> {
    let (h, w) = (map.map.dims()[0], map.map.dims()[1]);
    let b = region.source_box;
    let mut best: Option<Scored> = None;
    for y in b.row_span(h) {
        for x in b.col_span(w) {
            if region.contains(x, y) {
                continue;
            }
            let s = Scored { x, y, value: map.map.at2(y, x) };
            if best.is_none_or(|cur| key_order(&s, &cur).is_lt()) {
                best = Some(s);
            }
        }
    }
    best
}

/// Median point sampling with `divisions` levels of sort-and-divide.
///
/// Level `l` contributes the medians of the `2^l` sub-lists left by the
/// previous level, giving `2^divisions − 1` foreground points in level order,
/// followed by one background point. Each sub-list excludes its median; the
/// lower half keeps everything that sorts before it.
pub fn mps_sample(region: &DiscriminativeRegion, map: &AttentionRecord, divisions: u32) -> PointSample {
    let mut out = PointSample::default();
    if divisions == 0 {
        return out;
    }
    let mut values = region_values(region, map);
    values.sort_by(key_order);

    let mut level: Vec<std::ops::Range<usize>> = std::iter::once(0..values.len()).collect();
    for _ in 0..divisions {
        let mut next = Vec::with_capacity(level.len() * 2);
        for r in level {
            if r.is_empty() {
                out.truncated = true;
                continue;
            }
            let mid = r.start + (r.len() - 1) / 2;
            out.points.push(PointPrompt::at(values[mid], Polarity::Foreground));
            next.push(r.start..mid);
            next.push(mid + 1..r.end);
        }
        level = next;
    }

    match background_point(region, map) {
        Some(p) => out.points.push(PointPrompt::at(p, Polarity::Background)),
        None => out.missing_background = true,
    }
    out
}

/// Baseline: the `k` highest-activation region pixels plus the background point.
pub fn topk_sample(region: &DiscriminativeRegion, map: &AttentionRecord, k: usize) -> PointSample {
    let mut out = PointSample::default();
    let mut values = region_values(region, map);
    values.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    out.points.extend(values.iter().take(k).map(|&s| PointPrompt::at(s, Polarity::Foreground)));
    match background_point(region, map) {
        Some(p) => out.points.push(PointPrompt::at(p, Polarity::Background)),
        None => out.missing_background = true,
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub bbox: BBox,
    /// The segmenter returned nothing and the grounding box was kept.
    pub fallback: bool,
}

/// Segments the generated image with the prompt and returns the mask's tight box.
pub fn refine_annotation(
    image: &Tensor,
    prompt: &PromptSet,
    segmenter: &dyn SegmenterBackend,
) -> Result<Refinement, BackendError> {
    let (h, w, _) = image.hwc()?;
    let req =
        SegmentRequest { image: image.clone(), mode: SegmentMode::Prompt, scene: None, prompt: Some(prompt.clone()) };
    let seg = segmenter.segment(&req)?;
    let found = seg.masks.first().and_then(|m| tight_bbox(&m.mask));
    Ok(match found {
        Some(b) => Refinement { bbox: b, fallback: false },
        None => Refinement { bbox: prompt.bbox.clamp_to(w as f64, h as f64), fallback: true },
    })
}
