//! Runs the pipeline against backends served over TCP and checks the result
//! matches the in-process run byte for byte; also records a transcript and
//! replays it with no server.
//!
//! Run with `cargo run --release --example remote_backend`.

use std::sync::Arc;

use xsyn::backends::remote::{Endpoint, TcpTransport, TransportConfig};
use xsyn::backends::server::BackgroundServer;
use xsyn::backends::transcript::{Recorder, Replayer};
use xsyn::backends::wire::WireClient;
use xsyn::backends::{Backends, OracleSegmenter};
use xsyn::fixtures::three_image_corpus;
use xsyn::pipeline::{run_xsyn, PipelineConfig, PngDir};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = tempfile::tempdir()?;
    let corpus = three_image_corpus();
    let paths = corpus.write(work.path())?;
    let images = PngDir(paths.images.clone());
    let mock = || Backends::mock(0, OracleSegmenter::new(corpus.scenes.clone()));
    let cfg = PipelineConfig { seed: 7, steps: 20, synth_size: 256, ..PipelineConfig::default() };

    let local = run_xsyn(&corpus.dataset, &images, &cfg, &mock())?;

    let server = BackgroundServer::start("127.0.0.1:0", mock())?;
    let endpoint: Endpoint = server.endpoint().parse()?;
    println!("serving mock backends at {endpoint}");
    let recorder = Arc::new(Recorder::new(TcpTransport::new(endpoint, TransportConfig::default())));
    let remote = WireClient::connect(recorder.clone())?.into_backends();
    let over_tcp = run_xsyn(&corpus.dataset, &images, &cfg, &remote)?;
    println!(
        "local {} / tcp {} → identical: {}",
        &local.manifest.digest()[..12],
        &over_tcp.manifest.digest()[..12],
        local.manifest.to_json() == over_tcp.manifest.to_json()
    );

    let transcript = work.path().join("transcript.jsonl");
    recorder.save(&transcript)?;
    let replayer = Replayer::load(&transcript)?;
    println!("recorded {} distinct exchanges", replayer.len());
    let replayed = run_xsyn(&corpus.dataset, &images, &cfg, &WireClient::connect(replayer)?.into_backends())?;
    println!("replay identical: {}", replayed.manifest.to_json() == over_tcp.manifest.to_json());
    Ok(())
}
