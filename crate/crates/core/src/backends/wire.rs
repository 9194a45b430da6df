//! Wire protocol v1: newline-delimited JSON envelopes with base64 XTEN tensors.
//!
//! ```text
//! request   {"id": 7, "op": "denoise", "payload": {...}}
//! success   {"id": 7, "result": {...}}
//! failure   {"id": 7, "error": {"code": "DIMS_MISMATCH", "message": "..."}}
//! ```
//!
//! | op         | payload                          | result                      |
//! |------------|----------------------------------|-----------------------------|
//! | `manifest` | `{}`                             | manifest                    |
//! | `denoise`  | denoise request                  | `{"noise", "attention"}`    |
//! | `encode`   | `{"image": tensor}`              | `{"latent": tensor}`        |
//! | `decode`   | `{"latent": tensor}`             | `{"image": tensor}`         |
//! | `segment`  | segment request                  | `{"masks": [...]}`          |
//!
//! [`dispatch`] is the server side; [`WireClient`] turns any [`WireBackend`]
//! transport back into the typed backend traits, validating every response.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    validate_denoise_response, validate_segmentation, AutoencoderBackend, BackendError, BackendManifest, Backends,
    DenoiseRequest, DenoiseResponse, DenoiserBackend, ErrorCode, SegmentRequest, SegmenterBackend,
};
use crate::grounding::SegmentationResult;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Manifest,
    Denoise,
    Encode,
    Decode,
    Segment,
}

impl Op {
    pub fn as_str(&self) -> &'static str {
        match self {
            Op::Manifest => "manifest",
            Op::Denoise => "denoise",
            Op::Encode => "encode",
            Op::Decode => "decode",
            Op::Segment => "segment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub id: u64,
    pub op: Op,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEnvelope {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl ResponseEnvelope {
    pub fn from_outcome(id: Option<u64>, outcome: Result<Value, BackendError>) -> Self {
        match outcome {
            Ok(v) => ResponseEnvelope { id, result: Some(v), error: None },
            Err(e) => ResponseEnvelope { id, result: None, error: Some(error_body(&e)) },
        }
    }

    pub fn into_outcome(self) -> Result<Value, BackendError> {
        match (self.result, self.error) {
            (Some(v), None) => Ok(v),
            (None, Some(e)) => Err(BackendError::Remote { code: e.code, message: e.message }),
            _ => Err(BackendError::Protocol("envelope must carry exactly one of result or error".into())),
        }
    }
}

fn error_body(e: &BackendError) -> WireError {
    let message = match e {
        BackendError::Remote { message, .. } => message.clone(),
        other => other.to_string(),
    };
    WireError { code: e.code(), message }
}

#[derive(Serialize, Deserialize)]
struct ImagePayload {
    image: Tensor,
}

#[derive(Serialize, Deserialize)]
struct LatentPayload {
    latent: Tensor,
}

fn parse<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T, BackendError> {
    T::deserialize(v).map_err(|e| BackendError::BadRequest(e.to_string()))
}

fn to_value<T: Serialize>(v: &T) -> Result<Value, BackendError> {
    serde_json::to_value(v).map_err(|e| BackendError::Internal(e.to_string()))
}

/// Executes one operation against in-process backends.
pub fn dispatch(backends: &Backends, op: Op, payload: &Value) -> Result<Value, BackendError> {
    match op {
        Op::Manifest => to_value(&backends.manifest()?),
        Op::Denoise => to_value(&backends.denoiser.denoise(&parse::<DenoiseRequest>(payload)?)?),
        Op::Encode => {
            let p: ImagePayload = parse(payload)?;
            to_value(&LatentPayload { latent: backends.autoencoder.encode(&p.image)? })
        }
        Op::Decode => {
            let p: LatentPayload = parse(payload)?;
            to_value(&ImagePayload { image: backends.autoencoder.decode(&p.latent)? })
        }
        Op::Segment => to_value(&backends.segmenter.segment(&parse::<SegmentRequest>(payload)?)?),
    }
}

/// Answers one request line with one response line (no trailing newline).
pub fn handle_line(backends: &Backends, line: &str) -> String {
    let resp = match serde_json::from_str::<RequestEnvelope>(line) {
        Ok(req) => ResponseEnvelope::from_outcome(Some(req.id), dispatch(backends, req.op, &req.payload)),
        Err(e) => {
            let id = serde_json::from_str::<Value>(line).ok().and_then(|v| v.get("id").and_then(Value::as_u64));
            ResponseEnvelope::from_outcome(id, Err(BackendError::BadRequest(format!("malformed envelope: {e}"))))
        }
    };
    serde_json::to_string(&resp).expect("envelope serializes")
}

/// Anything that can carry one wire operation and return its result payload.
pub trait WireBackend: Send + Sync {
    fn call(&self, op: Op, payload: Value) -> Result<Value, BackendError>;
}

/// Loopback: in-process backends behind the wire encoding.
impl WireBackend for Backends {
    fn call(&self, op: Op, payload: Value) -> Result<Value, BackendError> {
        // Round-trip through text so the loopback exercises the same codec as a socket.
        let line = serde_json::to_string(&RequestEnvelope { id: 0, op, payload }).expect("envelope serializes");
        let resp: ResponseEnvelope =
            serde_json::from_str(&handle_line(self, &line)).map_err(|e| BackendError::Protocol(e.to_string()))?;
        resp.into_outcome()
    }
}

impl<T: WireBackend + ?Sized> WireBackend for Arc<T> {
    fn call(&self, op: Op, payload: Value) -> Result<Value, BackendError> {
        (**self).call(op, payload)
    }
}

/// Typed backend client over a wire transport.
pub struct WireClient<W> {
    transport: W,
    manifest: OnceLock<BackendManifest>,
}

fn decode_result<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, BackendError> {
    T::deserialize(v).map_err(|e| BackendError::Protocol(format!("malformed response: {e}")))
}

impl<W: WireBackend> WireClient<W> {
    pub fn new(transport: W) -> Self {
        WireClient { transport, manifest: OnceLock::new() }
    }

    /// Creates the client and fetches + validates the manifest eagerly.
    pub fn connect(transport: W) -> Result<Self, BackendError> {
        let c = Self::new(transport);
        c.fetch_manifest()?;
        Ok(c)
    }

    pub fn transport(&self) -> &W {
        &self.transport
    }

    fn fetch_manifest(&self) -> Result<BackendManifest, BackendError> {
        if let Some(m) = self.manifest.get() {
            return Ok(m.clone());
        }
        let m: BackendManifest = decode_result(self.transport.call(Op::Manifest, json!({}))?)?;
        m.validate()?;
        Ok(self.manifest.get_or_init(|| m).clone())
    }
}

impl<W: WireBackend + 'static> WireClient<W> {
    /// Shares one client across all three backend roles.
    pub fn into_backends(self) -> Backends {
        let c = Arc::new(self);
        Backends { denoiser: c.clone(), autoencoder: c.clone(), segmenter: c }
    }
}

impl<W: WireBackend> DenoiserBackend for WireClient<W> {
    fn manifest(&self) -> Result<BackendManifest, BackendError> {
        self.fetch_manifest()
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse, BackendError> {
        let manifest = self.fetch_manifest()?;
        let resp: DenoiseResponse = decode_result(self.transport.call(Op::Denoise, to_value(req)?)?)?;
        validate_denoise_response(req, &resp, &manifest).map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(resp)
    }
}

impl<W: WireBackend> AutoencoderBackend for WireClient<W> {
    fn encode(&self, image: &Tensor) -> Result<Tensor, BackendError> {
        let m = self.fetch_manifest()?;
        let (h, w, _) = image.hwc()?;
        let p = to_value(&ImagePayload { image: image.clone() })?;
        let out: LatentPayload = decode_result(self.transport.call(Op::Encode, p)?)?;
        let expect = [h / m.downscale, w / m.downscale, m.latent_channels];
        if out.latent.dims() != expect {
            return Err(BackendError::Protocol(format!(
                "encoder returned {:?}, expected {expect:?}",
                out.latent.dims()
            )));
        }
        out.latent.check_finite().map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(out.latent)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor, BackendError> {
        let m = self.fetch_manifest()?;
        let (h, w, _) = latent.hwc()?;
        let p = to_value(&LatentPayload { latent: latent.clone() })?;
        let out: ImagePayload = decode_result(self.transport.call(Op::Decode, p)?)?;
        let expect = [h * m.downscale, w * m.downscale, m.image_channels];
        if out.image.dims() != expect {
            return Err(BackendError::Protocol(format!(
                "decoder returned {:?}, expected {expect:?}",
                out.image.dims()
            )));
        }
        out.image.check_finite().map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(out.image)
    }
}

impl<W: WireBackend> SegmenterBackend for WireClient<W> {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentationResult, BackendError> {
        let resp: SegmentationResult = decode_result(self.transport.call(Op::Segment, to_value(req)?)?)?;
        validate_segmentation(req, &resp).map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(resp)
    }
}
