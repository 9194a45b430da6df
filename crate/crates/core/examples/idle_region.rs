//! Finds idle regions in a bag scan and picks a category for a new item.
//!
//! Run with `cargo run --example idle_region`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use xsyn::backends::{OracleSegmenter, SegmentMode, SegmentRequest, SegmenterBackend};
use xsyn::dataset::{build_class_groups, mean_area_per_class};
use xsyn::fixtures::three_image_corpus;
use xsyn::grounding::{build_g_add, candidate_idle_regions, select_category_for_region, select_idle_region};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = three_image_corpus();
    let table = build_class_groups(&mean_area_per_class(&corpus.dataset), (10_000.0, 25_000.0))?;
    let segmenter = OracleSegmenter::new(corpus.scenes.clone());
    let mut rng = ChaCha20Rng::seed_from_u64(7);

    for rec in &corpus.dataset.images {
        let image = corpus.render(&rec.id.0).expect("fixture image");
        let seg = segmenter.segment(&SegmentRequest {
            image,
            mode: SegmentMode::Auto,
            scene: Some(rec.id.0.clone()),
            prompt: None,
        })?;
        let boxes: Vec<_> = corpus.dataset.annotations_for(&rec.id).map(|a| a.bbox).collect();
        let candidates = candidate_idle_regions(&seg, &boxes, 0.2, 0.001, rec);
        println!("{}: {} segments, {} idle candidates", rec.id.0, seg.masks.len(), candidates.len());
        let region = select_idle_region(&candidates, &mut rng)?;
        let class = select_category_for_region(&region, &table, &mut rng)?;
        let g = build_g_add(region, &class)?;
        println!("  add {class:?} at {:?} (prompt {:?})", region.to_array(), g.text_prompt);
    }
    Ok(())
}
