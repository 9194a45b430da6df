//! Model backend contracts.
//!
//! The pipeline talks to three roles: a denoiser (noise prediction plus
//! per-entity cross-attention), an autoencoder (pixels ↔ latents) and a
//! promptable segmenter. Each role is a trait so the same orchestration runs
//! against the deterministic in-process [`mock`] and [`oracle`] backends or a
//! remote service reached through the [`wire`] protocol.

pub mod hash;
pub mod mock;
pub mod oracle;
pub mod remote;
pub mod server;
pub mod transcript;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::car::PromptSet;
use crate::grounding::{GroundingEntity, SegMask, SegmentationResult};
use crate::tensor::{Tensor, TensorError};

pub use mock::{MockAutoencoder, MockDenoiser, NoiseScript};
pub use oracle::{OracleSegmenter, Scene, SceneShape, ShapeKind};

pub const PROTOCOL_VERSION: u32 = 1;

/// Error codes carried in wire error envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadRequest,
    DimsMismatch,
    Internal,
    Unsupported,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("scene descriptor required for automatic segmentation: {0}")]
    MissingScene(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("protocol version mismatch: client speaks {expected}, backend reports {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("backend error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("internal backend error: {0}")]
    Internal(String),
}

impl BackendError {
    pub fn code(&self) -> ErrorCode {
        match self {
            BackendError::BadRequest(_) | BackendError::MissingScene(_) => ErrorCode::BadRequest,
            BackendError::DimsMismatch(_) => ErrorCode::DimsMismatch,
            BackendError::Unsupported(_) => ErrorCode::Unsupported,
            BackendError::Remote { code, .. } => *code,
            _ => ErrorCode::Internal,
        }
    }
}

impl From<TensorError> for BackendError {
    fn from(e: TensorError) -> Self {
        BackendError::DimsMismatch(e.to_string())
    }
}

/// Noise schedule shared by the engine and the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    /// `"scaled_linear"` or `"linear"`.
    pub kind: String,
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { kind: "scaled_linear".into(), train_timesteps: 1000, beta_start: 0.00085, beta_end: 0.012 }
    }
}

impl ScheduleSpec {
    /// Cumulative products of `1 - beta_t` for every training timestep.
    pub fn alphas_cumprod(&self) -> Result<Vec<f64>, BackendError> {
        let n = self.train_timesteps;
        if n < 2 {
            return Err(BackendError::BadRequest("schedule needs at least two timesteps".into()));
        }
        let betas: Vec<f64> = match self.kind.as_str() {
            "scaled_linear" => {
                let (a, b) = (self.beta_start.sqrt(), self.beta_end.sqrt());
                (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).powi(2)).collect()
            }
            "linear" => (0..n)
                .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64)
                .collect(),
            other => return Err(BackendError::Unsupported(format!("schedule kind {other:?}"))),
        };
        let mut acc = 1.0;
        Ok(betas
            .into_iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("schedule serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub attention: bool,
    pub prompt_segmentation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendManifest {
    pub backend_id: String,
    pub protocol_version: u32,
    pub downscale: usize,
    pub latent_channels: usize,
    pub image_channels: usize,
    pub schedule: ScheduleSpec,
    pub schedule_digest: String,
    pub capabilities: Capabilities,
}

impl BackendManifest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(BackendError::VersionMismatch { expected: PROTOCOL_VERSION, found: self.protocol_version });
        }
        if self.downscale == 0 || self.latent_channels == 0 || self.image_channels == 0 {
            return Err(BackendError::Protocol("manifest has a zero-sized geometry field".into()));
        }
        if self.schedule.digest() != self.schedule_digest {
            return Err(BackendError::Protocol("schedule digest does not match schedule".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical manifest JSON.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("manifest serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRequest {
    /// Expanded inpainting input `[h, w, 2C + 1]`.
    pub latent: Tensor,
    /// Sampling step index, counting down to 0.
    pub step: usize,
    /// Training timestep the latent is noised to.
    pub timestep: usize,
    pub prompt: String,
    pub entities: Vec<GroundingEntity>,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResponse {
    /// Predicted noise `[h, w, C]`.
    pub noise: Tensor,
    /// One `[h, w]` map per entity (conditional branch only).
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SegmentMode {
    Auto,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    /// `[H, W, C]` image; `C = 1` for rendered saliency maps.
    pub image: Tensor,
    pub mode: SegmentMode,
    /// Scene descriptor id for fixture-backed automatic segmentation.
    #[serde(default)]
    pub scene: Option<String>,
    #[serde(default)]
    pub prompt: Option<PromptSet>,
}

#[derive(Serialize, Deserialize)]
struct WireMask {
    mask: Tensor,
    area: u64,
    bbox: crate::geometry::BBox,
}

impl Serialize for SegmentationResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct W<'a> {
            masks: Vec<WireMaskRef<'a>>,
        }
        #[derive(Serialize)]
        struct WireMaskRef<'a> {
            mask: &'a Tensor,
            area: u64,
            bbox: crate::geometry::BBox,
        }
        W { masks: self.masks.iter().map(|m| WireMaskRef { mask: &m.mask, area: m.area, bbox: m.bbox }).collect() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SegmentationResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct W {
            masks: Vec<WireMask>,
        }
        let w = W::deserialize(d)?;
        Ok(SegmentationResult {
            masks: w.masks.into_iter().map(|m| SegMask { mask: m.mask, area: m.area, bbox: m.bbox }).collect(),
        })
    }
}

pub trait DenoiserBackend: Send + Sync {
    fn manifest(&self) -> Result<BackendManifest, BackendError>;
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse, BackendError>;
}

pub trait AutoencoderBackend: Send + Sync {
    /// `[H, W, 3]` pixels in `[0, 1]` to a `[H/f, W/f, C]` latent.
    fn encode(&self, image: &Tensor) -> Result<Tensor, BackendError>;
    /// Inverse of [`encode`](Self::encode).
    fn decode(&self, latent: &Tensor) -> Result<Tensor, BackendError>;
}

pub trait SegmenterBackend: Send + Sync {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentationResult, BackendError>;
}

/// The three backend roles used by one pipeline run.
#[derive(Clone)]
pub struct Backends {
    pub denoiser: Arc<dyn DenoiserBackend>,
    pub autoencoder: Arc<dyn AutoencoderBackend>,
    pub segmenter: Arc<dyn SegmenterBackend>,
}

impl Backends {
    /// In-process mocks: scripted denoiser, block autoencoder, scene-backed oracle segmenter.
    pub fn mock(seed: u64, segmenter: OracleSegmenter) -> Self {
        let manifest = mock::mock_manifest();
        Backends {
            denoiser: Arc::new(MockDenoiser::new(seed, NoiseScript::Scripted)),
            autoencoder: Arc::new(MockAutoencoder::new(manifest.downscale)),
            segmenter: Arc::new(segmenter),
        }
    }

    pub fn manifest(&self) -> Result<BackendManifest, BackendError> {
        self.denoiser.manifest()
    }
}

/// Checks a denoiser response against the request it answers.
pub fn validate_denoise_response(
    req: &DenoiseRequest,
    resp: &DenoiseResponse,
    manifest: &BackendManifest,
) -> Result<(), BackendError> {
    let (h, w, c) = req.latent.hwc()?;
    let lc = manifest.latent_channels;
    if c != 2 * lc + 1 {
        return Err(BackendError::DimsMismatch(format!("inpainting input has {c} channels, expected {}", 2 * lc + 1)));
    }
    if resp.noise.dims() != [h, w, lc] {
        return Err(BackendError::DimsMismatch(format!(
            "noise dims {:?} do not match latent [{h}, {w}, {lc}]",
            resp.noise.dims()
        )));
    }
    resp.noise.check_finite()?;
    let expect_maps = manifest.capabilities.attention && req.branch == Branch::Conditional;
    if expect_maps && resp.attention.len() != req.entities.len() {
        return Err(BackendError::DimsMismatch(format!(
            "{} attention maps for {} entities",
            resp.attention.len(),
            req.entities.len()
        )));
    }
    for m in &resp.attention {
        if m.dims() != [h, w] {
            return Err(BackendError::DimsMismatch(format!("attention map dims {:?}, expected [{h}, {w}]", m.dims())));
        }
        m.check_finite()?;
    }
    Ok(())
}

pub fn validate_segmentation(req: &SegmentRequest, resp: &SegmentationResult) -> Result<(), BackendError> {
    let (h, w, _) = req.image.hwc()?;
    if req.mode == SegmentMode::Prompt && resp.masks.len() != 1 {
        return Err(BackendError::DimsMismatch(format!("prompt segmentation returned {} masks", resp.masks.len())));
    }
    for m in &resp.masks {
        if m.mask.dims() != [h, w] {
            return Err(BackendError::DimsMismatch(format!("mask dims {:?}, expected [{h}, {w}]", m.mask.dims())));
        }
        m.mask.check_finite()?;
    }
    Ok(())
}
