//! End-to-end MOD run: every annotated item is regenerated in place, boxes are
//! refined and the result is partially hidden by clutter.
//!
//! Run with `cargo run --release --example xsyn_mod [OUT_DIR]`.

use xsyn::backends::{Backends, OracleSegmenter};
use xsyn::fixtures::three_image_corpus;
use xsyn::grounding::Mode;
use xsyn::pipeline::{generate, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/xsyn-mod".into()));
    let work = tempfile::tempdir()?;
    let corpus = three_image_corpus();
    let paths = corpus.write(work.path())?;
    let backends = Backends::mock(0, OracleSegmenter::new(corpus.scenes.clone()));

    let cfg = PipelineConfig { mode: Mode::Mod, seed: 7, ..PipelineConfig::default() };
    let run = generate(&paths.annotations, &paths.images, &out, &cfg, &backends)?;

    for (entry, img) in run.manifest.entries.iter().zip(&run.images) {
        println!("{}: {} boxes", entry.image_id, img.annotations.len());
        for a in &img.annotations {
            println!("  {:>9} {:?}", a.class_name, a.bbox.to_array());
        }
    }
    println!("wrote {} (manifest {})", out.display(), run.manifest.digest());
    Ok(())
}
