//! Golden transcript of the mock backends: one exchange per wire operation.
//!
//! `tests/golden/mock_transcript.jsonl` is the conformance suite for any
//! other implementation of the protocol: replaying each request against it
//! must yield byte-equal responses. Set `XSYN_BLESS=1` to rewrite the file
//! after an intentional change to the mocks.

use std::path::PathBuf;
use std::sync::Arc;

use xsyn::backends::remote::{TcpTransport, TransportConfig};
use xsyn::backends::server::BackgroundServer;
use xsyn::backends::transcript::{Exchange, Recorder, Replayer};
use xsyn::backends::wire::{handle_line, RequestEnvelope, ResponseEnvelope, WireBackend, WireClient};
use xsyn::backends::{
    Backends, Branch, DenoiseRequest, OracleSegmenter, Scene, SceneShape, SegmentMode, SegmentRequest,
};
use xsyn::car::{PointPrompt, Polarity, PromptSet};
use xsyn::grounding::GroundingEntity;
use xsyn::{BBox, Tensor};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mock_transcript.jsonl")
}

fn scene() -> Scene {
    Scene {
        id: "golden".into(),
        width: 16,
        height: 16,
        shapes: vec![
            SceneShape::rect(BBox::new(0.0, 0.0, 16.0, 16.0), 0.9),
            SceneShape::rect(BBox::new(1.0, 1.0, 15.0, 15.0), 0.7),
            SceneShape::rect(BBox::new(2.0, 3.0, 7.0, 9.0), 0.6),
            SceneShape::ellipse(BBox::new(8.0, 6.0, 14.0, 13.0), 0.2).labeled("Knife"),
        ],
    }
}

fn mock() -> Backends {
    Backends::mock(7, OracleSegmenter::new([scene()]))
}

/// Drives one request of every kind through `backends`.
fn exercise(b: &Backends) {
    let image = scene().render(16, 16);
    let latent = b.autoencoder.encode(&image).unwrap();
    b.autoencoder.decode(&latent).unwrap();
    for branch in [Branch::Conditional, Branch::Unconditional] {
        let conditional = branch == Branch::Conditional;
        let req = DenoiseRequest {
            latent: Tensor::from_fn3(2, 2, 9, |y, x, k| (y * 18 + x * 9 + k) as f32 * 0.05 - 0.4),
            step: 1,
            timestep: 500,
            prompt: if conditional { "Knife".into() } else { String::new() },
            entities: if conditional {
                vec![GroundingEntity { entity_text: "Knife".into(), bbox: BBox::new(8.0, 6.0, 14.0, 13.0) }]
            } else {
                Vec::new()
            },
            branch,
        };
        b.denoiser.denoise(&req).unwrap();
    }
    let auto =
        SegmentRequest { image: image.clone(), mode: SegmentMode::Auto, scene: Some("golden".into()), prompt: None };
    b.segmenter.segment(&auto).unwrap();
    let prompt = SegmentRequest {
        image,
        mode: SegmentMode::Prompt,
        scene: None,
        prompt: Some(PromptSet {
            points: vec![
                PointPrompt { x: 10.5, y: 9.5, polarity: Polarity::Foreground },
                PointPrompt { x: 8.5, y: 6.5, polarity: Polarity::Background },
            ],
            bbox: BBox::new(8.0, 6.0, 14.0, 13.0),
        }),
    };
    b.segmenter.segment(&prompt).unwrap();
}

fn record() -> String {
    let rec = Arc::new(Recorder::new(mock()));
    exercise(&WireClient::connect(rec.clone()).unwrap().into_backends());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    rec.save(&p).unwrap();
    std::fs::read_to_string(p).unwrap()
}

fn golden() -> Vec<Exchange> {
    let text = std::fs::read_to_string(golden_path()).expect("golden transcript is checked in");
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn mock_matches_golden_transcript() {
    let fresh = record();
    if std::env::var_os("XSYN_BLESS").is_some() {
        std::fs::write(golden_path(), &fresh).unwrap();
    }
    let stored = std::fs::read_to_string(golden_path()).expect("golden transcript is checked in");
    assert_eq!(fresh, stored, "mock output drifted from the golden transcript");
}

#[test]
fn golden_covers_every_operation() {
    let ops: std::collections::BTreeSet<&str> =
        golden().iter().map(|e| e.op.as_str()).collect::<Vec<_>>().into_iter().collect();
    assert_eq!(ops.into_iter().collect::<Vec<_>>(), ["decode", "denoise", "encode", "manifest", "segment"]);
    assert!(golden().iter().all(|e| e.response.error.is_none()));
}

#[test]
fn golden_requests_replay_byte_equal_over_the_line_protocol() {
    let backends = mock();
    for (i, e) in golden().into_iter().enumerate() {
        let line =
            serde_json::to_string(&RequestEnvelope { id: i as u64, op: e.op, payload: e.request.clone() }).unwrap();
        let reply: ResponseEnvelope = serde_json::from_str(&handle_line(&backends, &line)).unwrap();
        assert_eq!(reply.id, Some(i as u64));
        let expected = ResponseEnvelope { id: Some(i as u64), ..e.response.clone() };
        assert_eq!(serde_json::to_string(&reply).unwrap(), serde_json::to_string(&expected).unwrap(), "{}", e.key);
    }
}

#[test]
fn golden_requests_replay_over_tcp() {
    let server = BackgroundServer::start("127.0.0.1:0", mock()).unwrap();
    let t = TcpTransport::new(server.endpoint().parse().unwrap(), TransportConfig::default());
    for e in golden() {
        let got = t.call(e.op, e.request.clone()).unwrap();
        assert_eq!(got, e.response.clone().into_outcome().unwrap(), "{}", e.key);
    }
}

#[test]
fn golden_transcript_alone_serves_the_same_calls() {
    let replayed = WireClient::connect(Replayer::new(golden())).unwrap().into_backends();
    exercise(&replayed);
}
