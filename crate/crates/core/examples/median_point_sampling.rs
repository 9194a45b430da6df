//! Samples point prompts from an attention map: median-point sampling versus top-k.
//!
//! Run with `cargo run --example median_point_sampling`.

use xsyn::backends::OracleSegmenter;
use xsyn::car::{discriminative_region, mps_sample, topk_sample, Polarity};
use xsyn::engine::AttentionRecord;
use xsyn::{BBox, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A 64×64 map with a Gaussian blob centred at (40, 24).
    let map = Tensor::from_fn2(64, 64, |y, x| {
        let (dx, dy) = (x as f32 - 40.0, y as f32 - 24.0);
        (-(dx * dx + dy * dy) / 60.0).exp()
    });
    let att = AttentionRecord::from_normalized(map);
    let bbox = BBox::new(20.0, 8.0, 60.0, 44.0);

    let region = discriminative_region(&att, &bbox, &OracleSegmenter::default())?;
    println!("discriminative region: {} px (fallback: {})", region.pixel_count(), region.fallback);

    for n in 1..=4 {
        let s = mps_sample(&region, &att, n);
        let fg = s.points.iter().filter(|p| p.polarity == Polarity::Foreground).count();
        println!("MPS n={n}: {} points ({fg} foreground, truncated: {})", s.points.len(), s.truncated);
    }
    let s = mps_sample(&region, &att, 2);
    for p in &s.points {
        println!("  ({:5.1}, {:5.1}) {:?}", p.x, p.y, p.polarity);
    }
    let t = topk_sample(&region, &att, 3);
    println!("top-3 clusters at the peak:");
    for p in &t.points {
        println!("  ({:5.1}, {:5.1}) {:?}", p.x, p.y, p.polarity);
    }
    Ok(())
}
