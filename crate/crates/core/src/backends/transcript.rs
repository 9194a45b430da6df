//! Record/replay of wire exchanges.
//!
//! A [`Recorder`] wraps a live transport and keeps every distinct exchange,
//! keyed by the SHA-256 of the op name and the canonical (sorted-key) JSON
//! payload. A [`Replayer`] answers from such a transcript alone, so a pipeline
//! run can be reproduced — or a second backend implementation checked for
//! conformance — without the original service.
//!
//! Transcript files are JSON lines: `{"key", "op", "request", "response"}`,
//! where `response` is a wire response envelope body (`result` or `error`).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::wire::{Op, ResponseEnvelope, WireBackend};
use super::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub key: String,
    pub op: Op,
    pub request: Value,
    pub response: ResponseEnvelope,
}

/// Content key of one request.
pub fn exchange_key(op: Op, payload: &Value) -> String {
    let mut h = Sha256::new();
    h.update(op.as_str().as_bytes());
    h.update(b"\n");
    h.update(payload.to_string().as_bytes());
    hex::encode(h.finalize())
}

pub struct Recorder<W> {
    inner: W,
    log: Mutex<BTreeMap<String, Exchange>>,
}

impl<W: WireBackend> Recorder<W> {
    pub fn new(inner: W) -> Self {
        Recorder { inner, log: Mutex::new(BTreeMap::new()) }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().expect("transcript poisoned").values().cloned().collect()
    }

    /// Writes the transcript sorted by key, so concurrent runs produce identical files.
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in self.exchanges() {
            serde_json::to_writer(&mut f, &e)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }
}

impl<W: WireBackend> WireBackend for Recorder<W> {
    fn call(&self, op: Op, payload: Value) -> Result<Value, BackendError> {
        let key = exchange_key(op, &payload);
        let outcome = self.inner.call(op, payload.clone());
        // Transport failures are not part of the backend's behaviour.
        if !matches!(outcome, Err(BackendError::Transport(_))) {
            let response = ResponseEnvelope::from_outcome(None, outcome.clone());
            self.log
                .lock()
                .expect("transcript poisoned")
                .insert(key.clone(), Exchange { key, op, request: payload, response });
        }
        outcome
    }
}

pub struct Replayer {
    entries: BTreeMap<String, Exchange>,
}

impl Replayer {
    pub fn new(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        Replayer { entries: exchanges.into_iter().map(|e| (e.key.clone(), e)).collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let mut out = Vec::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self::new(out))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl WireBackend for Replayer {
    fn call(&self, op: Op, payload: Value) -> Result<Value, BackendError> {
        let key = exchange_key(op, &payload);
        match self.entries.get(&key) {
            Some(e) => e.response.clone().into_outcome(),
            None => Err(BackendError::Transport(format!("no recorded {} exchange with key {key}", op.as_str()))),
        }
    }
}
