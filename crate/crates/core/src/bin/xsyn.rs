//! Command-line front end.
//!
//! Usage and runtime errors are reported on stderr as one JSON object
//! (`{"error": {"kind": ..., "message": ...}}`) with a non-zero exit status.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use xsyn::backends::remote::{Endpoint, TcpTransport, TransportConfig};
use xsyn::backends::transcript::{Recorder, Replayer};
use xsyn::backends::wire::{WireBackend, WireClient};
use xsyn::backends::{Backends, OracleSegmenter};
use xsyn::bom::{Period, Space};
use xsyn::car::{discriminative_region, mps_sample, refine_annotation, topk_sample, PromptSet};
use xsyn::dataset::{build_class_groups, load_dataset, mean_area_per_class, ClassGroupTable};
use xsyn::engine::AttentionRecord;
use xsyn::fixtures;
use xsyn::grounding::Mode;
use xsyn::imageio::{grey_to_rgb, load_png, save_png};
use xsyn::pipeline::{generate, PipelineConfig, PointStrategy};
use xsyn::{BBox, Tensor};

#[derive(Parser)]
#[command(name = "xsyn", version, about = "Synthetic X-ray security image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-class mean box areas and write the three-group class table.
    Groups(GroupsArgs),
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Refine one box from an image and an attention map.
    Refine(RefineArgs),
    /// Render XTEN tensors (latents, masks, attention maps) as PNG grids.
    Inspect(InspectArgs),
    /// Serve the mock backends over the wire protocol.
    ServeMock(ServeArgs),
    /// Write a planted-shape fixture corpus.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct GroupsArgs {
    /// Annotation JSON.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [10000.0, 25000.0])]
    boundaries: Vec<f64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mod,
    Add,
}

#[derive(Clone, Copy, ValueEnum)]
enum PointsArg {
    Mps,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeriodArg {
    Final,
    EveryStep,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Latent,
    Pixel,
}

#[derive(Args)]
struct BackendArgs {
    /// `mock` or `tcp://host:port`; the XSYN_BACKEND environment variable overrides it.
    #[arg(long, default_value = "mock")]
    backend: String,
    /// Scene descriptors for the in-process oracle segmenter.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Seed of the in-process mock denoiser.
    #[arg(long, default_value_t = 0)]
    mock_seed: u64,
    /// Record every backend exchange to this transcript file.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Answer backend calls from a recorded transcript instead of a live backend.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Directory holding the images named in the annotation file.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mod")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.3)]
    alpha: f32,
    #[arg(long, default_value_t = 4)]
    divisions: u32,
    #[arg(long, default_value_t = 0.2)]
    iou: f64,
    #[arg(long, default_value_t = 0.001)]
    min_ratio: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 7.5)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the square synthesis canvas.
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, value_enum, default_value = "mps")]
    points: PointsArg,
    /// Point count for `--points topk`.
    #[arg(long, default_value_t = 15)]
    k: usize,
    #[arg(long, value_enum, default_value = "final")]
    bom_period: PeriodArg,
    #[arg(long, value_enum, default_value = "latent")]
    bom_space: SpaceArg,
    /// Class-group table (from `xsyn groups`); derived from the dataset when omitted.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [10000.0, 25000.0])]
    boundaries: Vec<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Also write latents and attention maps to out/debug.
    #[arg(long)]
    debug: bool,
    /// Write wall-clock statistics here (kept out of the manifest).
    #[arg(long)]
    timing_file: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct RefineArgs {
    /// Generated image, `.png` or `[H, W, 3]` `.xten`.
    #[arg(long)]
    image: PathBuf,
    /// Normalized `[H, W]` attention map (`.xten`).
    #[arg(long)]
    attention: PathBuf,
    /// Grounding box.
    #[arg(long = "box", num_args = 4, value_names = ["X1", "Y1", "X2", "Y2"], allow_negative_numbers = true)]
    bbox: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    divisions: u32,
    #[arg(long, value_enum, default_value = "mps")]
    points: PointsArg,
    #[arg(long, default_value_t = 15)]
    k: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct InspectArgs {
    /// XTEN files to render.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7450")]
    listen: String,
    #[arg(long, default_value_t = 0)]
    mock_seed: u64,
    #[arg(long)]
    scenes: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// Random corpus of this many images instead of the three-image fixture.
    #[arg(long)]
    random: Option<usize>,
    #[arg(long, default_value_t = 512)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// The single-image corpus without idle regions.
    #[arg(long, conflicts_with = "random")]
    no_idle: bool,
}

type AnyError = Box<dyn std::error::Error>;

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 2);
        }
    };
    let result = match cli.command {
        Command::Groups(a) => groups(a),
        Command::Gen(a) => gen(a),
        Command::Refine(a) => refine(a),
        Command::Inspect(a) => inspect(a),
        Command::ServeMock(a) => serve_mock(a),
        Command::Fixture(a) => fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail("runtime", &e.to_string(), 1),
    }
}

fn boundaries(v: &[f64]) -> (f64, f64) {
    (v[0], v[1])
}

fn groups(a: GroupsArgs) -> Result<(), AnyError> {
    let ds = load_dataset(&a.annotations)?;
    let table = build_class_groups(&mean_area_per_class(&ds), boundaries(&a.boundaries))?;
    let missing = ds.classes_without_annotations();
    if !missing.is_empty() {
        log::warn!("classes without annotations were left out: {}", missing.join(", "));
    }
    match a.out {
        Some(p) => std::fs::write(p, table.to_json())?,
        None => print!("{}", table.to_json()),
    }
    Ok(())
}

type SharedRecorder = Arc<Recorder<Arc<dyn WireBackend>>>;

/// Live backends plus the recorder to flush afterwards, if any.
struct Session {
    backends: Backends,
    recorder: Option<(SharedRecorder, PathBuf)>,
    label: String,
}

impl Session {
    fn finish(&self) -> Result<(), AnyError> {
        if let Some((rec, path)) = &self.recorder {
            rec.save(path)?;
        }
        Ok(())
    }
}

fn open_backends(a: &BackendArgs) -> Result<Session, AnyError> {
    let configured = (a.backend != "mock").then_some(a.backend.as_str());
    let (transport, label): (Arc<dyn WireBackend>, String) = if let Some(p) = &a.replay {
        (Arc::new(Replayer::load(p)?), format!("replay:{}", p.display()))
    } else if let Some(ep) = Endpoint::resolve(configured)? {
        let label = ep.to_string();
        (Arc::new(TcpTransport::new(ep, TransportConfig::default())), label)
    } else {
        let seg = match &a.scenes {
            Some(p) => OracleSegmenter::from_file(p)?,
            None => OracleSegmenter::default(),
        };
        let mock = Backends::mock(a.mock_seed, seg);
        if a.record.is_none() {
            return Ok(Session { backends: mock, recorder: None, label: "mock".into() });
        }
        (Arc::new(mock), "mock".into())
    };
    match &a.record {
        Some(path) => {
            let rec = Arc::new(Recorder::new(transport));
            let backends = WireClient::connect(rec.clone())?.into_backends();
            Ok(Session { backends, recorder: Some((rec, path.clone())), label })
        }
        None => Ok(Session { backends: WireClient::connect(transport)?.into_backends(), recorder: None, label }),
    }
}

fn gen(a: GenArgs) -> Result<(), AnyError> {
    let session = open_backends(&a.backend)?;
    let groups = a.groups.as_ref().map(ClassGroupTable::load).transpose()?;
    let cfg = PipelineConfig {
        mode: match a.mode {
            ModeArg::Mod => Mode::Mod,
            ModeArg::Add => Mode::Add,
        },
        alpha: a.alpha,
        divisions: a.divisions,
        iou_threshold: a.iou,
        min_ratio: a.min_ratio,
        steps: a.steps,
        guidance_scale: a.guidance,
        seed: a.seed,
        synth_size: a.size,
        points: match a.points {
            PointsArg::Mps => PointStrategy::Mps,
            PointsArg::Topk => PointStrategy::Topk(a.k),
        },
        bom_period: match a.bom_period {
            PeriodArg::Final => Period::Final,
            PeriodArg::EveryStep => Period::EveryStep,
        },
        bom_space: match a.bom_space {
            SpaceArg::Latent => Space::Latent,
            SpaceArg::Pixel => Space::Pixel,
        },
        boundaries: boundaries(&a.boundaries),
        groups,
        backend: session.label.clone(),
        jobs: a.jobs,
        debug: a.debug,
    };
    let out = generate(&a.annotations, &a.images, &a.out, &cfg, &session.backends)?;
    session.finish()?;
    if let Some(p) = a.timing_file {
        std::fs::write(p, serde_json::to_string_pretty(&out.timing)? + "\n")?;
    }
    println!(
        "{}",
        json!({
            "generated": out.manifest.generated(),
            "skipped": out.manifest.entries.len() - out.manifest.generated(),
            "manifest_sha256": out.manifest.digest(),
        })
    );
    Ok(())
}

fn load_image(p: &Path) -> Result<Tensor, AnyError> {
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        Ok(load_png(p)?)
    } else {
        Ok(Tensor::load_xten(p)?)
    }
}

fn refine(a: RefineArgs) -> Result<(), AnyError> {
    let session = open_backends(&a.backend)?;
    let image = load_image(&a.image)?;
    let map = Tensor::load_xten(&a.attention)?;
    let (lo, hi) = map.min_max();
    if map.dims().len() != 2 || lo < 0.0 || hi > 1.0 {
        return Err(format!("attention map must be a normalized [H, W] tensor, got {:?}", map.dims()).into());
    }
    let record = AttentionRecord { degenerate: hi == lo, map, samples: 1 };
    let bbox = BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
    if !bbox.is_well_formed() {
        return Err(format!("box {:?} is not well formed", a.bbox).into());
    }
    let seg = session.backends.segmenter.as_ref();
    let region = discriminative_region(&record, &bbox, seg)?;
    let sample = match a.points {
        PointsArg::Mps => mps_sample(&region, &record, a.divisions),
        PointsArg::Topk => topk_sample(&region, &record, a.k),
    };
    let prompt = PromptSet { points: sample.points, bbox };
    let refined = refine_annotation(&image, &prompt, seg)?;
    session.finish()?;
    println!(
        "{}",
        json!({
            "box": refined.bbox,
            "fallback": refined.fallback,
            "region_fallback": region.fallback,
            "truncated": sample.truncated,
            "prompt": prompt,
        })
    );
    Ok(())
}

/// Min-max normalizes each channel and lays channels out left to right.
fn tile(t: &Tensor) -> Result<Tensor, AnyError> {
    let d = t.dims();
    let (h, w, c) = match d.len() {
        2 => (d[0], d[1], 1),
        3 => (d[0], d[1], d[2]),
        _ => return Err(format!("cannot render a rank-{} tensor", d.len()).into()),
    };
    if c == 3 && t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Ok(t.clone());
    }
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); c];
    for (i, &v) in t.data().iter().enumerate() {
        let r = &mut ranges[i % c];
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    }
    let grid = Tensor::from_fn2(h, w * c, |y, x| {
        let (k, xx) = (x / w, x % w);
        let (lo, hi) = ranges[k];
        let v = t.data()[(y * w + xx) * c + k];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    });
    Ok(grey_to_rgb(&grid))
}

fn inspect(a: InspectArgs) -> Result<(), AnyError> {
    std::fs::create_dir_all(&a.out)?;
    for p in &a.inputs {
        let t = Tensor::load_xten(p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("tensor");
        let dest = a.out.join(format!("{stem}.png"));
        save_png(&dest, &tile(&t)?)?;
        println!("{}", json!({"input": p, "dims": t.dims(), "output": dest}));
    }
    Ok(())
}

fn serve_mock(a: ServeArgs) -> Result<(), AnyError> {
    let seg = match &a.scenes {
        Some(p) => OracleSegmenter::from_file(p)?,
        None => OracleSegmenter::default(),
    };
    let listen = a.listen.strip_prefix("tcp://").unwrap_or(&a.listen);
    let listener = std::net::TcpListener::bind(listen)?;
    println!("{}", json!({"listening": format!("tcp://{}", listener.local_addr()?)}));
    xsyn::backends::server::serve(listener, Backends::mock(a.mock_seed, seg))?;
    Ok(())
}

fn fixture(a: FixtureArgs) -> Result<(), AnyError> {
    let corpus = match (a.random, a.no_idle) {
        (Some(n), _) => fixtures::random_corpus(n, a.size, a.seed),
        (None, true) => fixtures::no_idle_corpus(),
        (None, false) => fixtures::three_image_corpus(),
    };
    let paths = corpus.write(&a.out)?;
    println!(
        "{}",
        json!({
            "annotations": paths.annotations,
            "images": paths.images,
            "scenes": paths.scenes,
        })
    );
    Ok(())
}
