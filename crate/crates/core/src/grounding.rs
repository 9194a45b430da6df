//! Grounding conditions for the two synthesis variants.
//!
//! * Modify (`Mode::Mod`): every annotated item is repainted in place, so the
//!   grounding entities are exactly the image's annotations.
//! * Add (`Mode::Add`): one new item is painted into an idle background region
//!   picked from a segment-everything result, with a category whose typical
//!   size matches the region.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BoxAnnotation, ClassGroupTable, ImageRecord};
use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("no foreground annotation survives filtering")]
    NoForeground,
    #[error("no idle region satisfies the placement criterion")]
    NoIdleRegion,
    #[error("class-group table has no classes")]
    EmptyGroups,
    #[error("box {0:?} is not well formed")]
    BadBox([f64; 4]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Mod,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingEntity {
    pub entity_text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingCondition {
    pub entities: Vec<GroundingEntity>,
    pub text_prompt: String,
    pub mode: Mode,
}

impl GroundingCondition {
    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.entities.iter().map(|e| &e.bbox)
    }
}

/// One mask from a segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    /// `H × W` tensor with values in `{0, 1}`.
    pub mask: Tensor,
    pub area: u64,
    /// Tight box of the set pixels; all zeros for an empty mask.
    pub bbox: BBox,
}

impl SegMask {
    pub fn from_mask(mask: Tensor) -> Self {
        let area = mask.data().iter().filter(|&&v| v > 0.5).count() as u64;
        let bbox = tight_bbox(&mask).unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
        SegMask { mask, area, bbox }
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentationResult {
    pub masks: Vec<SegMask>,
}

/// Smallest pixel-aligned box covering every set pixel of an `H × W` mask.
pub fn tight_bbox(mask: &Tensor) -> Option<BBox> {
    let (h, w, _) = mask.hwc().ok()?;
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..h {
        let row = &mask.data()[y * w..(y + 1) * w];
        for (x, &v) in row.iter().enumerate() {
            if v > 0.5 {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

fn join_prompt<'a>(names: impl Iterator<Item = &'a str>) -> String {
    names.collect::<Vec<_>>().join(", ")
}

/// Grounding condition that repaints every annotation in place.
pub fn build_g_mod(annotations: &[BoxAnnotation]) -> Result<GroundingCondition, GroundingError> {
    if annotations.is_empty() {
        return Err(GroundingError::NoForeground);
    }
    let entities: Vec<GroundingEntity> =
        annotations.iter().map(|a| GroundingEntity { entity_text: a.class_name.clone(), bbox: a.bbox }).collect();
    let text_prompt = join_prompt(entities.iter().map(|e| e.entity_text.as_str()));
    Ok(GroundingCondition { entities, text_prompt, mode: Mode::Mod })
}

/// Single-entity condition for a new item at `bbox`.
pub fn build_g_add(bbox: BBox, class_name: &str) -> Result<GroundingCondition, GroundingError> {
    if !bbox.is_well_formed() {
        return Err(GroundingError::BadBox(bbox.into()));
    }
    Ok(GroundingCondition {
        entities: vec![GroundingEntity { entity_text: class_name.to_owned(), bbox }],
        text_prompt: class_name.to_owned(),
        mode: Mode::Add,
    })
}

/// Indices of the masks ordered by descending pixel area, ties by segmenter order.
fn by_area_desc(seg: &SegmentationResult) -> Vec<usize> {
    let mut order: Vec<usize> = (0..seg.masks.len()).collect();
    order.sort_by(|&a, &b| seg.masks[b].area.cmp(&seg.masks[a].area).then(a.cmp(&b)));
    order
}

/// Boxes of segmented regions that are safe placement sites.
///
/// The two largest masks (background and the whole bag) are dropped, boxes
/// smaller than `min_ratio` of the image are dropped, and a box survives only
/// if its IoU with *every* annotation box is below `d`. Survivors keep the
/// segmenter's order.
pub fn candidate_idle_regions(
    seg: &SegmentationResult,
    annotations: &[BBox],
    d: f64,
    min_ratio: f64,
    image: &ImageRecord,
) -> Vec<BBox> {
    if seg.masks.len() < 3 {
        return Vec::new();
    }
    let order = by_area_desc(seg);
    let mut keep: Vec<usize> = order[2..]
        .iter()
        .copied()
        .filter(|&k| {
            let b = &seg.masks[k].bbox;
            !seg.masks[k].is_empty()
                && b.area() >= min_ratio * image.area()
                && annotations.iter().all(|a| iou(b, a) < d)
        })
        .collect();
    keep.sort_unstable();
    keep.into_iter().map(|k| seg.masks[k].bbox).collect()
}

/// Uniform choice among candidates.
pub fn select_idle_region<R: Rng + ?Sized>(candidates: &[BBox], rng: &mut R) -> Result<BBox, GroundingError> {
    if candidates.is_empty() {
        return Err(GroundingError::NoIdleRegion);
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Category for a region of the given box, drawn from the group matching its area.
///
/// An empty group falls back to the non-empty group closest to the area
/// (ties go to the smaller group index).
pub fn select_category_for_region<R: Rng + ?Sized>(
    bbox: &BBox,
    table: &ClassGroupTable,
    rng: &mut R,
) -> Result<String, GroundingError> {
    select_category_for_area(bbox.area(), table, rng)
}

pub fn select_category_for_area<R: Rng + ?Sized>(
    area: f64,
    table: &ClassGroupTable,
    rng: &mut R,
) -> Result<String, GroundingError> {
    let preferred = table.group_for_area(area);
    let group = if !table.groups[preferred].is_empty() {
        preferred
    } else {
        (0..3)
            .filter(|&g| !table.groups[g].is_empty())
            .min_by(|&a, &b| {
                table.distance_to_group(area, a).total_cmp(&table.distance_to_group(area, b)).then(a.cmp(&b))
            })
            .ok_or(GroundingError::EmptyGroups)?
    };
    let members = &table.groups[group];
    Ok(members[rng.random_range(0..members.len())].clone())
}
