//! Derives the small / medium / large class-group table from mean box areas.
//!
//! Run with `cargo run --example class_groups`.

use xsyn::dataset::{build_class_groups, mean_area_per_class, ClassGroupTable};
use xsyn::fixtures::three_image_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = three_image_corpus();
    let means = mean_area_per_class(&corpus.dataset);
    for (class, area) in &means {
        println!("{class:>10}  mean area {area:>9.1} px²");
    }

    let table = build_class_groups(&means, (10_000.0, 25_000.0))?;
    for (name, group) in ["small", "medium", "large"].iter().zip(&table.groups) {
        println!("{name:>6}: {}", group.join(", "));
    }
    println!("no annotations: {}", corpus.dataset.classes_without_annotations().join(", "));

    // Shipped presets for the public benchmarks.
    let pidray = ClassGroupTable::pidray();
    println!("PIDray preset groups sizes: {:?}", pidray.groups.each_ref().map(Vec::len));
    Ok(())
}
