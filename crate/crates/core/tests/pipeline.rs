//! End-to-end pipeline behaviour on the planted-shape fixtures.

use xsyn::backends::mock::item_placement;
use xsyn::backends::{Backends, OracleSegmenter};
use xsyn::dataset::load_dataset;
use xsyn::fixtures::{random_corpus, three_image_corpus, Corpus};
use xsyn::grounding::{GroundingEntity, Mode};
use xsyn::imageio::load_png;
use xsyn::pipeline::{generate, run_xsyn, ImageStatus, PipelineConfig, RunOutput, SkipReason};
use xsyn::BBox;

fn run(c: &Corpus, cfg: &PipelineConfig) -> RunOutput {
    run_xsyn(&c.dataset, c, cfg, &Backends::mock(0, OracleSegmenter::new(c.scenes.clone()))).unwrap()
}

/// Box of the item the mock denoiser painted for an entity, in synthesis pixels.
fn planted(entity: &str, grounding: BBox, size: usize) -> BBox {
    let e = GroundingEntity { entity_text: entity.into(), bbox: grounding };
    item_placement(0, &e, 8).pixel_rect(8, size / 8, size / 8)
}

#[test]
fn refined_boxes_recover_painted_items() {
    let corpus = random_corpus(12, 256, 21);
    for mode in [Mode::Mod, Mode::Add] {
        let cfg = PipelineConfig { mode, steps: 10, synth_size: 256, seed: 4, ..Default::default() };
        let out = run(&corpus, &cfg);
        let mut checked = 0;
        for entry in &out.manifest.entries {
            let ImageStatus::Generated { entities, .. } = &entry.status else { continue };
            // Items painted for overlapping grounding boxes may merge; skip those images.
            let rects: Vec<BBox> = entities.iter().map(|e| planted(&e.class_name, e.grounding_box, 256)).collect();
            let touching = rects.iter().enumerate().any(|(i, a)| {
                rects[i + 1..].iter().any(|b| a.x1 <= b.x2 && b.x1 <= a.x2 && a.y1 <= b.y2 && b.y1 <= a.y2)
            });
            if touching {
                continue;
            }
            for (e, r) in entities.iter().zip(&rects) {
                assert_eq!(e.refined_box, *r, "{} {}", entry.image_id, e.class_name);
                assert!(e.flags.is_empty(), "{:?}", e.flags);
                checked += 1;
            }
        }
        assert!(checked >= 10, "{mode:?}: only {checked} entities checked");
    }
}

#[test]
fn output_boxes_are_valid_and_inside_the_canvas() {
    let corpus = three_image_corpus();
    for mode in [Mode::Mod, Mode::Add] {
        let out = run(&corpus, &PipelineConfig { mode, steps: 6, seed: 2, ..Default::default() });
        assert_eq!(out.manifest.entries.len(), corpus.dataset.images.len());
        for img in &out.images {
            assert_eq!((img.record.width, img.record.height), (512, 512));
            assert_eq!(img.image.dims(), &[512, 512, 3]);
            for a in &img.annotations {
                assert!(a.bbox.is_well_formed());
                assert!(BBox::new(0.0, 0.0, 512.0, 512.0).contains_box(&a.bbox), "{:?}", a.bbox);
                assert!(out.dataset.class_names.contains(&a.class_name));
            }
        }
    }
}

#[test]
fn generate_writes_the_output_tree_and_keeps_failures_in_the_manifest() {
    let corpus = three_image_corpus();
    let dir = tempfile::tempdir().unwrap();
    let paths = corpus.write(dir.path().join("in")).unwrap();
    std::fs::remove_file(paths.images.join("bag-002.png")).unwrap();

    let out_dir = dir.path().join("out");
    let cfg = PipelineConfig { steps: 6, synth_size: 256, seed: 9, ..Default::default() };
    let backends = Backends::mock(0, OracleSegmenter::new(corpus.scenes.clone()));
    let out = generate(&paths.annotations, &paths.images, &out_dir, &cfg, &backends).unwrap();

    assert_eq!(out.manifest.entries.len(), 3);
    assert!(matches!(&out.manifest.entries[1].status, ImageStatus::Skipped { reason: SkipReason::ImageLoad(_) }));
    let written = load_dataset(out_dir.join("annotations.json")).unwrap();
    assert_eq!(written, out.dataset);
    assert_eq!(written.images.len(), 2);
    for rec in &written.images {
        let png = load_png(out_dir.join("images").join(&rec.file_name)).unwrap();
        assert_eq!(png.dims(), &[256, 256, 3]);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"][1]["status"], "skipped");
    assert_eq!(manifest["entries"][1]["reason"], "ImageLoad");
    assert!(!out_dir.join("debug").exists());
}

#[test]
fn thread_count_does_not_change_results() {
    let corpus = random_corpus(6, 128, 3);
    let base = PipelineConfig { steps: 5, synth_size: 128, seed: 1, ..Default::default() };
    let one = run(&corpus, &PipelineConfig { jobs: 1, ..base.clone() });
    let many = run(&corpus, &PipelineConfig { jobs: 4, ..base });
    assert_eq!(one.manifest.to_json(), many.manifest.to_json());
}
