//! End-to-end ADD run: a new item of a size-matched class is painted into an
//! idle region of each bag.
//!
//! Run with `cargo run --release --example xsyn_add [OUT_DIR]`.

use xsyn::backends::{Backends, OracleSegmenter};
use xsyn::fixtures::three_image_corpus;
use xsyn::grounding::Mode;
use xsyn::pipeline::{generate, ImageStatus, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/xsyn-add".into()));
    let work = tempfile::tempdir()?;
    let corpus = three_image_corpus();
    let paths = corpus.write(work.path())?;
    let backends = Backends::mock(0, OracleSegmenter::new(corpus.scenes.clone()));

    let cfg = PipelineConfig { mode: Mode::Add, seed: 11, ..PipelineConfig::default() };
    let run = generate(&paths.annotations, &paths.images, &out, &cfg, &backends)?;

    for entry in &run.manifest.entries {
        match &entry.status {
            ImageStatus::Generated { entities, .. } => {
                for e in entities {
                    println!(
                        "{}: added {} at {:?}, refined to {:?}",
                        entry.image_id,
                        e.class_name,
                        e.grounding_box.to_array(),
                        e.refined_box.to_array()
                    );
                }
            }
            ImageStatus::Skipped { reason } => println!("{}: skipped ({reason:?})", entry.image_id),
        }
    }
    println!("{} annotations in {}", run.dataset.annotations.len(), out.join("annotations.json").display());
    Ok(())
}
