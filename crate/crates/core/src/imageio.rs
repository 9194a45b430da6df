//! PNG reading/writing and resampling for `[H, W, 3]` float images.

use std::path::Path;

use image::{imageops, ImageBuffer, Rgb, RgbImage};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("image {path}: {source}")]
    Codec { path: String, source: image::ImageError },
    #[error("expected an [H, W, 3] tensor, got {0:?}")]
    Shape(Vec<usize>),
}

fn to_rgb8(t: &Tensor) -> Result<RgbImage, ImageIoError> {
    let (h, w, c) = t.hwc().map_err(|_| ImageIoError::Shape(t.dims().to_vec()))?;
    if c != 3 {
        return Err(ImageIoError::Shape(t.dims().to_vec()));
    }
    let bytes = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches dims"))
}

fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("buffer length matches dims")
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn save_png(path: impl AsRef<Path>, t: &Tensor) -> Result<(), ImageIoError> {
    let p = path.as_ref();
    to_rgb8(t)?
        .save_with_format(p, image::ImageFormat::Png)
        .map_err(|source| ImageIoError::Codec { path: p.display().to_string(), source })
}

/// PNG bytes of an image (same quantization as [`save_png`]).
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>, ImageIoError> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_rgb8(t)?
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| ImageIoError::Codec { path: "<memory>".into(), source })?;
    Ok(out.into_inner())
}

/// Reads any PNG as RGB in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor, ImageIoError> {
    let p = path.as_ref();
    let img = image::open(p).map_err(|source| ImageIoError::Codec { path: p.display().to_string(), source })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Bilinear resize; identity when the size already matches.
pub fn resize(t: &Tensor, height: usize, width: usize) -> Result<Tensor, ImageIoError> {
    let (h, w, c) = t.hwc().map_err(|_| ImageIoError::Shape(t.dims().to_vec()))?;
    if c != 3 {
        return Err(ImageIoError::Shape(t.dims().to_vec()));
    }
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let src: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, t.data().to_vec()).expect("buffer length matches dims");
    let out = imageops::resize(&src, width as u32, height as u32, imageops::FilterType::Triangle);
    Ok(Tensor::new(vec![height, width, 3], out.into_raw()).expect("buffer length matches dims"))
}

/// Grey `[H, W]` map in `[0, 1]` as an RGB image tensor.
pub fn grey_to_rgb(map: &Tensor) -> Tensor {
    let (h, w) = (map.dims()[0], map.dims()[1]);
    Tensor::from_fn3(h, w, 3, |y, x, _| map.at2(y, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let t = Tensor::from_fn3(5, 7, 3, |y, x, k| ((y * 7 + x) * 3 + k) as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, &t).unwrap();
        assert!(load_png(&p).unwrap().bit_eq(&t));
        assert_eq!(std::fs::read(&p).unwrap(), encode_png(&t).unwrap());
    }

    #[test]
    fn resize_shapes() {
        let t = Tensor::full(&[6, 8, 3], 0.25);
        let r = resize(&t, 12, 4).unwrap();
        assert_eq!(r.dims(), &[12, 4, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(resize(&t, 6, 8).unwrap().bit_eq(&t));
        assert!(resize(&Tensor::zeros(&[2, 2]), 4, 4).is_err());
    }
}
