//! Synthetic X-ray security image generation.
//!
//! The crate turns a labelled detection dataset into new training images by
//! grounded latent inpainting: existing items are regenerated in place
//! ([`grounding::Mode::Mod`]) or a new item is painted into an empty region of
//! the bag ([`grounding::Mode::Add`]). Generated item boxes are tightened with
//! cross-attention refinement ([`car`]) and the result is partially hidden
//! behind background clutter ([`bom`]).
//!
//! Model roles sit behind the traits in [`backends`]; deterministic mocks make
//! the whole pipeline reproducible and testable without trained weights.

pub mod backends;
pub mod bom;
pub mod car;
pub mod dataset;
pub mod engine;
pub mod fixtures;
pub mod geometry;
pub mod grounding;
pub mod imageio;
pub mod pipeline;
pub mod tensor;

pub use geometry::{iou, BBox, CellBox};
pub use tensor::{Tensor, TensorError};
