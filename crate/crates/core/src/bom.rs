//! Background occlusion modeling.
//!
//! A background segment (chosen with the same idle-region machinery as item
//! placement) serves as an occluder. Each foreground target box is jittered so
//! that it still overlaps its source, and the occluder's latent crop is
//! alpha-blended into it. The result is the "hidden" latent that gets shipped;
//! annotation refinement always sees the unoccluded original.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageRecord;
use crate::engine::StepHook;
use crate::geometry::{iou, BBox, CellBox};
use crate::grounding::{candidate_idle_regions, SegmentationResult};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BomError {
    #[error("no background segment qualifies as an occluder")]
    OcclusionSkipped,
    #[error("target {0:?} has zero area on the latent grid")]
    DegenerateTarget(CellBox),
    #[error("blend weight {0} outside [0, 1]")]
    Alpha(f32),
    #[error("dimension inconsistency: {0}")]
    Dims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Period {
    #[default]
    Final,
    EveryStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Space {
    #[default]
    Latent,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub pixel_box: BBox,
    /// Covering cells on the latent grid.
    pub latent_box: CellBox,
    pub w: usize,
    pub h: usize,
}

impl OccluderSpec {
    pub fn from_pixel_box(pixel_box: BBox, factor: usize, grid_w: usize, grid_h: usize) -> Result<Self, BomError> {
        let latent_box = CellBox::covering(&pixel_box, factor, grid_w, grid_h);
        if latent_box.is_empty() {
            return Err(BomError::DegenerateTarget(latent_box));
        }
        Ok(OccluderSpec { pixel_box, latent_box, w: latent_box.width(), h: latent_box.height() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPlan {
    pub alpha: f32,
    /// Perturbed target boxes on the latent grid, in application order.
    pub targets: Vec<CellBox>,
    pub period: Period,
    pub space: Space,
}

/// Picks an occluder uniformly among the idle-region candidates; in ADD mode the
/// candidate must also keep its distance from the new item's box.
#[allow(clippy::too_many_arguments)]
pub fn select_occluder<R: Rng + ?Sized>(
    seg: &SegmentationResult,
    annotations: &[BBox],
    g_add_box: Option<&BBox>,
    d: f64,
    min_ratio: f64,
    image: &ImageRecord,
    factor: usize,
    rng: &mut R,
) -> Result<OccluderSpec, BomError> {
    let candidates: Vec<BBox> = candidate_idle_regions(seg, annotations, d, min_ratio, image)
        .into_iter()
        .filter(|c| g_add_box.is_none_or(|lb| iou(c, lb) < d))
        .collect();
    if candidates.is_empty() {
        return Err(BomError::OcclusionSkipped);
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    let (gw, gh) = (image.width as usize / factor, image.height as usize / factor);
    OccluderSpec::from_pixel_box(pick, factor, gw, gh)
}

/// Jitters a target so it still overlaps its source:
/// `x1' ~ U[max(x1 − w_o, 0), x2)`, `x2' = min(x1' + w_o, W')`, likewise for `y`.
pub fn perturb_region<R: Rng + ?Sized>(
    target: &CellBox,
    occ: &OccluderSpec,
    grid_w: usize,
    grid_h: usize,
    rng: &mut R,
) -> Result<CellBox, BomError> {
    if target.is_empty() || target.x2 > grid_w || target.y2 > grid_h {
        return Err(BomError::DegenerateTarget(*target));
    }
    let x1 = rng.random_range(target.x1.saturating_sub(occ.w)..target.x2);
    let y1 = rng.random_range(target.y1.saturating_sub(occ.h)..target.y2);
    Ok(CellBox { x1, y1, x2: (x1 + occ.w).min(grid_w), y2: (y1 + occ.h).min(grid_h) })
}

/// Blends the `src` crop into every target of `t` in order, in place.
///
/// The source crop is re-read from the current tensor for each target and
/// trimmed top-left-aligned to the target's size.
pub fn blend_crops(t: &mut Tensor, src: CellBox, targets: &[CellBox], alpha: f32) -> Result<(), BomError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BomError::Alpha(alpha));
    }
    let (h, w, c) = t.hwc().map_err(|e| BomError::Dims(e.to_string()))?;
    let inside = |b: &CellBox| b.x2 <= w && b.y2 <= h;
    if !inside(&src) {
        return Err(BomError::Dims(format!("occluder {src:?} outside {w}×{h}")));
    }
    if alpha == 0.0 {
        return Ok(());
    }
    for tb in targets {
        if !inside(tb) {
            return Err(BomError::Dims(format!("target {tb:?} outside {w}×{h}")));
        }
        let cw = tb.width().min(src.width());
        let ch = tb.height().min(src.height());
        if tb.width() > src.width() || tb.height() > src.height() {
            return Err(BomError::Dims(format!("target {tb:?} larger than occluder {src:?}")));
        }
        let data = t.data_mut();
        let crop: Vec<f32> = (0..ch)
            .flat_map(|dy| {
                let row = ((src.y1 + dy) * w + src.x1) * c;
                data[row..row + cw * c].to_vec()
            })
            .collect();
        for dy in 0..ch {
            let row = ((tb.y1 + dy) * w + tb.x1) * c;
            for (i, v) in data[row..row + cw * c].iter_mut().enumerate() {
                let o = crop[dy * cw * c + i];
                *v = if alpha == 1.0 { o } else { o * alpha + *v * (1.0 - alpha) };
            }
        }
    }
    Ok(())
}

/// `z_0^h`: the occluder's latent crop blended into every planned target.
pub fn recombine(z0: &Tensor, plan: &OcclusionPlan, occ: &OccluderSpec) -> Result<Tensor, BomError> {
    let mut out = z0.clone();
    blend_crops(&mut out, occ.latent_box, &plan.targets, plan.alpha)?;
    Ok(out)
}

fn scale_cells(b: &CellBox, f: usize) -> CellBox {
    CellBox { x1: b.x1 * f, y1: b.y1 * f, x2: b.x2 * f, y2: b.y2 * f }
}

/// Same blend on the decoded image, with every latent cell widened to `factor` pixels.
pub fn occlude_pixel_space(
    image: &Tensor,
    plan: &OcclusionPlan,
    occ: &OccluderSpec,
    factor: usize,
) -> Result<Tensor, BomError> {
    let targets: Vec<CellBox> = plan.targets.iter().map(|b| scale_cells(b, factor)).collect();
    let mut out = image.clone();
    blend_crops(&mut out, scale_cells(&occ.latent_box, factor), &targets, plan.alpha)?;
    Ok(out)
}

/// Applies the plan to the working latent after every denoising step.
pub struct EveryStepOcclusion<'a> {
    pub plan: &'a OcclusionPlan,
    pub occ: &'a OccluderSpec,
}

impl StepHook for EveryStepOcclusion<'_> {
    fn after_step(&mut self, _step: usize, latent: &mut Tensor) -> Result<(), String> {
        blend_crops(latent, self.occ.latent_box, &self.plan.targets, self.plan.alpha).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockDenoiser, NoiseScript};
    use crate::engine::{run_sampling, run_sampling_with, InpaintMask, SamplerConfig};
    use crate::grounding::{build_g_add, SegMask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn occ(x1: usize, y1: usize, x2: usize, y2: usize) -> OccluderSpec {
        let b = BBox::new(x1 as f64 * 8.0, y1 as f64 * 8.0, x2 as f64 * 8.0, y2 as f64 * 8.0);
        OccluderSpec::from_pixel_box(b, 8, 64, 64).unwrap()
    }

    fn latent(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn3(h, w, 4, |_, _, _| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn occluder_projection() {
        let o = OccluderSpec::from_pixel_box(BBox::new(16.0, 16.0, 48.0, 48.0), 8, 64, 64).unwrap();
        assert_eq!(o.latent_box, CellBox { x1: 2, y1: 2, x2: 6, y2: 6 });
        assert_eq!((o.w, o.h), (4, 4));
        let o = OccluderSpec::from_pixel_box(BBox::new(17.0, 3.0, 47.0, 9.0), 8, 64, 64).unwrap();
        assert_eq!(o.latent_box, CellBox { x1: 2, y1: 0, x2: 6, y2: 2 });
    }

    #[test]
    fn perturb_bounds() {
        let o = occ(0, 0, 4, 4);
        let t = CellBox { x1: 8, y1: 8, x2: 16, y2: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p = perturb_region(&t, &o, 64, 64, &mut rng).unwrap();
            assert!((4..16).contains(&p.x1) && (4..16).contains(&p.y1));
            assert_eq!(p.x2, p.x1 + 4);
        }
        let edge = CellBox { x1: 60, y1: 0, x2: 64, y2: 4 };
        let mut clamped = false;
        for _ in 0..200 {
            let p = perturb_region(&edge, &o, 64, 64, &mut rng).unwrap();
            assert!(p.x2 <= 64);
            clamped |= p.width() < 4;
        }
        assert!(clamped);
        let a = perturb_region(&t, &o, 64, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = perturb_region(&t, &o, 64, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(perturb_region(&CellBox { x1: 3, y1: 3, x2: 3, y2: 5 }, &o, 64, 64, &mut rng).is_err());
    }

    #[test]
    fn alpha_extremes() {
        let z = latent(16, 16, 2);
        let o = occ(0, 0, 4, 4);
        let mut plan = OcclusionPlan {
            alpha: 0.0,
            targets: vec![CellBox { x1: 8, y1: 8, x2: 12, y2: 11 }],
            period: Period::Final,
            space: Space::Latent,
        };
        assert!(recombine(&z, &plan, &o).unwrap().bit_eq(&z));
        plan.alpha = 1.0;
        let out = recombine(&z, &plan, &o).unwrap();
        for dy in 0..3 {
            for dx in 0..4 {
                for k in 0..4 {
                    assert_eq!(out.at3(8 + dy, 8 + dx, k).to_bits(), z.at3(dy, dx, k).to_bits());
                }
            }
        }
    }

    #[test]
    fn blend_matches_reference() {
        let z = latent(16, 16, 3);
        let o = occ(1, 2, 5, 6);
        let t = CellBox { x1: 9, y1: 7, x2: 13, y2: 11 };
        let plan = OcclusionPlan { alpha: 0.3, targets: vec![t], period: Period::Final, space: Space::Latent };
        let out = recombine(&z, &plan, &o).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for k in 0..4 {
                    let expect = if t.contains(x, y) {
                        z.at3(y - 7 + 2, x - 9 + 1, k) * 0.3 + z.at3(y, x, k) * (1.0 - 0.3)
                    } else {
                        z.at3(y, x, k)
                    };
                    assert_eq!(out.at3(y, x, k).to_bits(), expect.to_bits());
                }
            }
        }
        // Swapping roles under α ↔ 1 − α.
        let mirror = OcclusionPlan { alpha: 0.7, ..plan.clone() };
        let m = recombine(&z, &mirror, &o).unwrap();
        for y in 7..11 {
            for x in 9..13 {
                let (ov, tv) = (z.at3(y - 5, x - 8, 0), z.at3(y, x, 0));
                assert!((m.at3(y, x, 0) - (tv * 0.3 + ov * 0.7)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pixel_space_extremes() {
        let img = Tensor::from_fn3(32, 32, 3, |y, x, k| ((y * 32 + x) * 3 + k) as f32 / 3072.0);
        let o = OccluderSpec::from_pixel_box(BBox::new(0.0, 0.0, 8.0, 8.0), 8, 4, 4).unwrap();
        let mut plan = OcclusionPlan {
            alpha: 0.0,
            targets: vec![CellBox { x1: 2, y1: 2, x2: 3, y2: 3 }],
            period: Period::Final,
            space: Space::Pixel,
        };
        assert!(occlude_pixel_space(&img, &plan, &o, 8).unwrap().bit_eq(&img));
        plan.alpha = 1.0;
        let out = occlude_pixel_space(&img, &plan, &o, 8).unwrap();
        assert_eq!(out.at3(16, 16, 1), img.at3(0, 0, 1));
        assert_eq!(out.at3(23, 23, 2), img.at3(7, 7, 2));
        assert_eq!(out.at3(24, 24, 0), img.at3(24, 24, 0));
    }

    #[test]
    fn occluder_selection_respects_add_box() {
        let m = |b: BBox, area: u64| SegMask { mask: Tensor::zeros(&[1, 1]), area, bbox: b };
        let seg = SegmentationResult {
            masks: vec![
                m(BBox::new(0.0, 0.0, 512.0, 512.0), 262144),
                m(BBox::new(20.0, 20.0, 500.0, 500.0), 200000),
                m(BBox::new(100.0, 100.0, 200.0, 200.0), 10000),
                m(BBox::new(300.0, 300.0, 360.0, 360.0), 3600),
            ],
        };
        let img = ImageRecord::new("a", 512, 512, "a.png");
        let lb = BBox::new(110.0, 110.0, 210.0, 210.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let o = select_occluder(&seg, &[], Some(&lb), 0.2, 0.001, &img, 8, &mut rng).unwrap();
            assert_eq!(o.pixel_box, BBox::new(300.0, 300.0, 360.0, 360.0));
        }
        let both = BBox::new(300.0, 300.0, 360.0, 360.0);
        assert_eq!(
            select_occluder(&seg, &[both], Some(&lb), 0.2, 0.001, &img, 8, &mut rng),
            Err(BomError::OcclusionSkipped)
        );
    }

    #[test]
    fn every_step_collapses_for_one_step_and_zero_alpha() {
        let z0 = latent(8, 8, 4);
        let b = BBox::new(24.0, 24.0, 56.0, 56.0);
        let mask = InpaintMask::from_boxes([&b], 64, 64, 8).unwrap();
        let den = MockDenoiser::new(1, NoiseScript::Scripted);
        let cond = build_g_add(b, "Gun").unwrap();
        let o = occ(0, 0, 2, 2);
        let plan = OcclusionPlan {
            alpha: 0.3,
            targets: vec![CellBox { x1: 4, y1: 4, x2: 6, y2: 6 }],
            period: Period::EveryStep,
            space: Space::Latent,
        };

        let one = SamplerConfig { steps: 1, guidance_scale: 7.5, seed: 2 };
        let final_mode = recombine(&run_sampling(&z0, &mask, &cond, &one, &den).unwrap().latent, &plan, &o).unwrap();
        let mut hook = EveryStepOcclusion { plan: &plan, occ: &o };
        let every = run_sampling_with(&z0, &mask, &cond, &one, &den, &mut hook).unwrap().latent;
        assert!(final_mode.bit_eq(&every));

        let four = SamplerConfig { steps: 4, ..one };
        let zero = OcclusionPlan { alpha: 0.0, ..plan.clone() };
        let base = run_sampling(&z0, &mask, &cond, &four, &den).unwrap().latent;
        let mut hook = EveryStepOcclusion { plan: &zero, occ: &o };
        assert!(run_sampling_with(&z0, &mask, &cond, &four, &den, &mut hook).unwrap().latent.bit_eq(&base));

        let mut hook = EveryStepOcclusion { plan: &plan, occ: &o };
        let a = run_sampling_with(&z0, &mask, &cond, &four, &den, &mut hook).unwrap().latent;
        let mut hook = EveryStepOcclusion { plan: &plan, occ: &o };
        let b2 = run_sampling_with(&z0, &mask, &cond, &four, &den, &mut hook).unwrap().latent;
        assert!(a.bit_eq(&b2));
        assert!(!a.bit_eq(&base));
    }
}
