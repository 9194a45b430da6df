//! Dense row-major `f32` tensors and the XTEN v1 binary file format.
//!
//! XTEN layout, all integers little-endian:
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `b"XTEN"`                |
//! | 4      | 1         | version (`1`)                  |
//! | 5      | 1         | dtype code (`1` = float32)     |
//! | 6      | 1         | rank                           |
//! | 7      | 1         | padding (`0`)                  |
//! | 8      | 4 × rank  | dims as `u32`                  |
//! | …      | 4 × numel | payload as `f32`               |

use std::path::Path;

use base64::Engine as _;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const XTEN_MAGIC: &[u8; 4] = b"XTEN";
pub const XTEN_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("dims {dims:?} describe {expected} elements but {actual} were given")]
    Length { dims: Vec<usize>, expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("XTEN: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if dims.contains(&0) || expected != data.len() {
            return Err(TensorError::Length { dims, expected, actual: data.len() });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], v: f32) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![v; n] }
    }

    pub fn from_fn3(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    data.push(f(y, x, k));
                }
            }
        }
        Tensor { dims: vec![h, w, c], data }
    }

    pub fn from_fn2(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Tensor { dims: vec![h, w], data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(height, width, channels)` of a rank-2 or rank-3 tensor; rank 2 has one channel.
    pub fn hwc(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.dims.as_slice() {
            &[h, w] => Ok((h, w, 1)),
            &[h, w, c] => Ok((h, w, c)),
            d => Err(TensorError::Shape(format!("expected an HxW or HxWxC tensor, got {d:?}"))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        let (_, w, ch) = self.hwc().expect("spatial tensor");
        self.data[(y * w + x) * ch + c]
    }

    pub fn at2(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.dims[1] + x]
    }

    /// First non-finite element, if any.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Length { dims, expected: n, actual: self.data.len() });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Serializes to XTEN v1 bytes.
    pub fn to_xten(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(XTEN_MAGIC);
        out.push(XTEN_VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses XTEN v1 bytes and validates dims against the payload and finiteness.
    pub fn from_xten(bytes: &[u8]) -> Result<Self, TensorError> {
        let fmt = |m: &str| TensorError::Format(m.to_owned());
        if bytes.len() < 8 {
            return Err(fmt("truncated header"));
        }
        if &bytes[0..4] != XTEN_MAGIC {
            return Err(fmt("bad magic"));
        }
        if bytes[4] != XTEN_VERSION {
            return Err(TensorError::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(TensorError::Format(format!("unsupported dtype code {}", bytes[5])));
        }
        let rank = bytes[6] as usize;
        let body = &bytes[8..];
        if body.len() < 4 * rank {
            return Err(fmt("truncated dims"));
        }
        let dims: Vec<usize> =
            body[..4 * rank].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
        let payload = &body[4 * rank..];
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match expected {
            Some(n) if n.checked_mul(4) == Some(payload.len()) => {}
            _ => {
                return Err(TensorError::Format(format!(
                    "dims {dims:?} disagree with a {}-byte payload",
                    payload.len()
                )))
            }
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(dims, data).map_err(|e| TensorError::Format(e.to_string()))?;
        t.check_finite()?;
        Ok(t)
    }

    pub fn save_xten(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_xten())
    }

    pub fn load_xten(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Tensor::from_xten(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Same dims and identical bit patterns (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Hex SHA-256 of the XTEN encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_xten()))
    }
}

/// Tensors travel as `{"xten_b64": "<base64 of the XTEN bytes>"}`.
impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire {
            xten_b64: String,
        }
        Wire { xten_b64: base64::engine::general_purpose::STANDARD.encode(self.to_xten()) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            xten_b64: String,
        }
        let w = Wire::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(w.xten_b64.as_bytes())
            .map_err(|e| D::Error::custom(format!("malformed base64 tensor: {e}")))?;
        Tensor::from_xten(&bytes).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_xten();
        let mut expected = b"XTEN".to_vec();
        expected.extend_from_slice(&[1, 1, 2, 0]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expected);
        assert_eq!(Tensor::from_xten(&b).unwrap(), t);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let mut b = Tensor::zeros(&[2, 2]).to_xten();
        b.pop();
        assert!(matches!(Tensor::from_xten(&b), Err(TensorError::Format(_))));
        let mut b = Tensor::zeros(&[1]).to_xten();
        b[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(Tensor::from_xten(&b), Err(TensorError::NonFinite(0)));
        let mut b = Tensor::zeros(&[1]).to_xten();
        b[0] = b'Y';
        assert!(Tensor::from_xten(&b).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn xten_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
                let n: usize = dims.iter().product();
                let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
                let t = Tensor::new(dims, data).unwrap();
                prop_assert_eq!(Tensor::from_xten(&t.to_xten()).unwrap(), t);
            }
        }
    }
}
