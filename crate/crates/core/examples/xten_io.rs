//! XTEN tensor files: the binary format for latents, masks and attention maps.
//!
//! Run with `cargo run --example xten_io`.

use xsyn::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = Tensor::from_fn3(4, 6, 2, |y, x, c| (y * 12 + x * 2 + c) as f32 * 0.5);
    let bytes = t.to_xten();
    println!("magic {:?}, version {}, dtype {}, rank {}", &bytes[..4], bytes[4], bytes[5], bytes[6]);
    let dims: Vec<u32> = bytes[8..8 + 4 * 3].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    println!("dims {dims:?}, {} bytes total", bytes.len());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("latent.xten");
    t.save_xten(&path)?;
    let back = Tensor::load_xten(&path)?;
    println!("round trip bit-exact: {}", back.bit_eq(&t));
    println!("digest {}", back.digest());

    let mut corrupt = bytes.clone();
    corrupt[0] = b'Y';
    println!("bad magic rejected: {}", Tensor::from_xten(&corrupt).unwrap_err());
    Ok(())
}
