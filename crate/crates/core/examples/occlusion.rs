//! Background occlusion: blends an idle clutter crop over a generated item.
//!
//! Run with `cargo run --example occlusion`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use xsyn::bom::{occlude_pixel_space, perturb_region, recombine, OccluderSpec, OcclusionPlan, Period, Space};
use xsyn::{BBox, CellBox, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (gw, gh) = (32, 32);
    // Latent with a "clutter" patch in channel 0 and an item elsewhere.
    let z0 = Tensor::from_fn3(gh, gw, 4, |y, x, k| match (x, y, k) {
        (4..12, 4..10, 0) => 1.0,
        (18..26, 18..26, 0) => -1.0,
        _ => 0.0,
    });
    let occ = OccluderSpec::from_pixel_box(BBox::new(32.0, 32.0, 96.0, 80.0), 8, gw, gh)?;
    let item = CellBox { x1: 18, y1: 18, x2: 26, y2: 26 };

    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let target = perturb_region(&item, &occ, gw, gh, &mut rng)?;
    println!("occluder {:?} ({}×{} cells) → target {:?}", occ.latent_box, occ.w, occ.h, target);

    let plan = OcclusionPlan { alpha: 0.3, targets: vec![target], period: Period::Final, space: Space::Latent };
    let hidden = recombine(&z0, &plan, &occ)?;
    let (x, y) = (target.x1.max(item.x1), target.y1.max(item.y1));
    println!("cell ({x}, {y}) channel 0: {} → {}", z0.at3(y, x, 0), hidden.at3(y, x, 0));

    // The same plan applied to a decoded image, each cell widened to 8×8 pixels.
    let image = Tensor::full(&[gh * 8, gw * 8, 3], 0.5);
    let pixel = occlude_pixel_space(&image, &plan, &occ, 8)?;
    println!("pixel-space result dims {:?}", pixel.dims());
    Ok(())
}
