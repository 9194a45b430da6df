//! End-to-end synthesis over a detection dataset.
//!
//! Per image: filter small boxes → resize to the synthesis size → build the
//! grounding condition (regenerate existing items, or add one item to an idle
//! region) → encode → inpaint → refine every generated box on the *original*
//! result → occlude with a background segment → decode the *hidden* result,
//! which is what gets written. Images are processed on a worker pool; each
//! image draws from its own RNG seeded by `(seed, image_id)`, so results do not
//! depend on scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::hash::{fnv1a, mix};
use crate::backends::{BackendError, Backends, SegmentMode, SegmentRequest};
use crate::bom::{
    occlude_pixel_space, perturb_region, recombine, select_occluder, BomError, EveryStepOcclusion, OccluderSpec,
    OcclusionPlan, Period, Space,
};
use crate::car::{discriminative_region, mps_sample, refine_annotation, topk_sample, PointPrompt, PromptSet};
use crate::dataset::{
    build_class_groups, filter_small_boxes, mean_area_per_class, BoxAnnotation, ClassGroupTable, DatasetError,
    DetectionDataset, ImageRecord,
};
use crate::engine::{run_sampling_with, EngineError, InpaintMask, NoHook, SamplerConfig};
use crate::geometry::{BBox, CellBox};
use crate::grounding::{
    build_g_add, build_g_mod, candidate_idle_regions, select_category_for_area, select_idle_region, GroundingCondition,
    Mode, SegmentationResult,
};
use crate::imageio::{encode_png, load_png, resize, ImageIoError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PointStrategy {
    /// Median point sampling with the configured number of divisions.
    Mps,
    /// The `k` most activated pixels.
    Topk(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Occluder blend weight.
    pub alpha: f32,
    /// Median point sampling depth.
    pub divisions: u32,
    /// IoU threshold for idle regions and occluders.
    pub iou_threshold: f64,
    /// Minimum box area as a fraction of the image area.
    pub min_ratio: f64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Side of the square synthesis canvas in pixels.
    pub synth_size: usize,
    pub points: PointStrategy,
    pub bom_period: Period,
    pub bom_space: Space,
    /// Area boundaries used when class groups are derived from the dataset.
    pub boundaries: (f64, f64),
    /// Explicit class groups for ADD mode; derived from mean areas when absent.
    #[serde(default)]
    pub groups: Option<ClassGroupTable>,
    /// `"mock"` or a `tcp://host:port` endpoint; recorded for provenance.
    pub backend: String,
    /// Worker threads; 0 picks the machine default. Does not affect outputs.
    #[serde(skip)]
    pub jobs: usize,
    /// Also write latents and attention maps as XTEN files.
    #[serde(skip)]
    pub debug: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Mod,
            alpha: 0.3,
            divisions: 4,
            iou_threshold: 0.2,
            min_ratio: 0.001,
            steps: 50,
            guidance_scale: 7.5,
            seed: 0,
            synth_size: 512,
            points: PointStrategy::Mps,
            bom_period: Period::Final,
            bom_space: Space::Latent,
            boundaries: (10000.0, 25000.0),
            groups: None,
            backend: "mock".into(),
            jobs: 0,
            debug: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad(format!("iou threshold {} outside (0, 1]", self.iou_threshold));
        }
        if !(0.0..1.0).contains(&self.min_ratio) {
            return bad(format!("min ratio {} outside [0, 1)", self.min_ratio));
        }
        if self.synth_size == 0 {
            return bad("synthesis size must be positive".into());
        }
        if self.divisions > 16 {
            return bad(format!("{} divisions is unreasonably deep", self.divisions));
        }
        if let PointStrategy::Topk(0) = self.points {
            return bad("top-k sampling needs k ≥ 1".into());
        }
        self.sampler(0).validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { steps: self.steps, guidance_scale: self.guidance_scale, seed }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backend unavailable: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Why an image produced no output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail")]
pub enum SkipReason {
    NoForeground,
    NoIdleRegion,
    NoCategory,
    ImageLoad(String),
    Backend(String),
    Numerical(String),
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipReason::NoForeground => write!(f, "NoForeground"),
            SkipReason::NoIdleRegion => write!(f, "NoIdleRegion"),
            SkipReason::NoCategory => write!(f, "NoCategory"),
            SkipReason::ImageLoad(m) => write!(f, "ImageLoad: {m}"),
            SkipReason::Backend(m) => write!(f, "Backend: {m}"),
            SkipReason::Numerical(m) => write!(f, "Numerical: {m}"),
        }
    }
}

impl From<EngineError> for SkipReason {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Numerical { .. } => SkipReason::Numerical(e.to_string()),
            other => SkipReason::Backend(other.to_string()),
        }
    }
}

impl From<BackendError> for SkipReason {
    fn from(e: BackendError) -> Self {
        SkipReason::Backend(e.to_string())
    }
}

/// Refinement outcome for one generated entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityOutcome {
    pub class_name: String,
    pub grounding_box: BBox,
    pub refined_box: BBox,
    /// Point prompts sent to the segmenter, foreground first.
    pub points: Vec<PointPrompt>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ImageStatus {
    Generated {
        entities: Vec<EntityOutcome>,
        #[serde(skip_serializing_if = "Option::is_none")]
        occluder: Option<BBox>,
        targets: Vec<CellBox>,
        image_sha256: String,
    },
    Skipped {
        #[serde(flatten)]
        reason: SkipReason,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    #[serde(flatten)]
    pub status: ImageStatus,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub backend_id: String,
    pub backend_manifest_sha256: String,
    /// Fixed conventions a reader needs to interpret the outputs.
    pub conventions: BTreeMap<String, String>,
    pub entries: Vec<ImageEntry>,
    pub annotations_sha256: String,
}

/// Wall-clock statistics, kept out of the manifest so outputs stay byte-stable.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_image_seconds: BTreeMap<String, f64>,
}

pub struct GeneratedImage {
    pub record: ImageRecord,
    pub annotations: Vec<BoxAnnotation>,
    pub image: Tensor,
    pub debug: Vec<(String, Tensor)>,
}

pub struct RunOutput {
    pub dataset: DetectionDataset,
    pub manifest: RunManifest,
    pub images: Vec<GeneratedImage>,
    pub timing: Timing,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_seed(seed: u64, image_id: &str, tag: u64) -> u64 {
    mix(&[seed, fnv1a(image_id), tag])
}

/// Where an image's pixels come from.
pub trait ImageSource: Sync {
    fn load(&self, record: &ImageRecord) -> Result<Tensor, String>;
}

/// PNG files under a directory, named by each record's `file_name`.
pub struct PngDir(pub PathBuf);

impl ImageSource for PngDir {
    fn load(&self, record: &ImageRecord) -> Result<Tensor, String> {
        let t = load_png(self.0.join(&record.file_name)).map_err(|e| e.to_string())?;
        if t.dims()[..2] != [record.height as usize, record.width as usize] {
            return Err(format!(
                "{} is {}×{}, dataset says {}×{}",
                record.file_name,
                t.dims()[1],
                t.dims()[0],
                record.width,
                record.height
            ));
        }
        Ok(t)
    }
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    backends: &'a Backends,
    groups: Option<ClassGroupTable>,
    factor: usize,
}

struct Done {
    entry: ImageEntry,
    output: Option<GeneratedImage>,
}

fn auto_segment(ctx: &Context, image: &Tensor, id: &str) -> Result<SegmentationResult, BackendError> {
    ctx.backends.segmenter.segment(&SegmentRequest {
        image: image.clone(),
        mode: SegmentMode::Auto,
        scene: Some(id.to_string()),
        prompt: None,
    })
}

fn process_image(
    ctx: &Context,
    source: &dyn ImageSource,
    rec: &ImageRecord,
    anns: &[BoxAnnotation],
) -> Result<(GeneratedImage, ImageStatus, Vec<String>), SkipReason> {
    let cfg = ctx.cfg;
    let id = rec.id.0.as_str();
    let mut flags = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(image_seed(cfg.seed, id, 1));
    let s = cfg.synth_size;

    let kept = filter_small_boxes(anns, rec, cfg.min_ratio);
    let pixels = source.load(rec).map_err(SkipReason::ImageLoad)?;
    let image = resize(&pixels, s, s).map_err(|e| SkipReason::ImageLoad(e.to_string()))?;
    let (sx, sy) = (s as f64 / rec.width as f64, s as f64 / rec.height as f64);
    let synth_rec = ImageRecord::new(id, s as u32, s as u32, format!("{id}.png"));
    let scaled: Vec<BoxAnnotation> = kept
        .iter()
        .map(|a| BoxAnnotation { bbox: a.bbox.scale(sx, sy).clamp_to(s as f64, s as f64), ..a.clone() })
        .collect();
    let scaled_boxes: Vec<BBox> = scaled.iter().map(|a| a.bbox).collect();

    let seg = auto_segment(ctx, &image, id)?;
    let cond: GroundingCondition = match cfg.mode {
        Mode::Mod => build_g_mod(&scaled).map_err(|_| SkipReason::NoForeground)?,
        Mode::Add => {
            let cands = candidate_idle_regions(&seg, &scaled_boxes, cfg.iou_threshold, cfg.min_ratio, &synth_rec);
            let lb = select_idle_region(&cands, &mut rng).map_err(|_| SkipReason::NoIdleRegion)?;
            let table = ctx.groups.as_ref().ok_or(SkipReason::NoCategory)?;
            // Groups are defined on original-resolution areas.
            let class =
                select_category_for_area(lb.area() / (sx * sy), table, &mut rng).map_err(|_| SkipReason::NoCategory)?;
            build_g_add(lb, &class).map_err(|_| SkipReason::NoForeground)?
        }
    };
    if cfg.mode == Mode::Mod {
        flags.push(format!("mod_entities={}", cond.entities.len()));
    }

    // Occlusion plan: drawn before sampling so every-step mode can use it.
    let (gw, gh) = (s / ctx.factor, s / ctx.factor);
    let g_add_box = (cfg.mode == Mode::Add).then(|| cond.entities[0].bbox);
    let occluder: Option<OccluderSpec> = match select_occluder(
        &seg,
        &scaled_boxes,
        g_add_box.as_ref(),
        cfg.iou_threshold,
        cfg.min_ratio,
        &synth_rec,
        ctx.factor,
        &mut rng,
    ) {
        Ok(o) => Some(o),
        Err(BomError::OcclusionSkipped) => {
            flags.push("occlusion_skipped".into());
            None
        }
        Err(e) => {
            flags.push(format!("occlusion_skipped: {e}"));
            None
        }
    };
    let mut target_boxes: Vec<BBox> = scaled_boxes.clone();
    for b in cond.boxes() {
        if !target_boxes.contains(b) {
            target_boxes.push(*b);
        }
    }
    let plan = occluder.map(|occ| {
        let mut targets = Vec::new();
        for b in &target_boxes {
            let cell = CellBox::covering(b, ctx.factor, gw, gh);
            match perturb_region(&cell, &occ, gw, gh, &mut rng) {
                Ok(t) => targets.push(t),
                Err(_) => flags.push(format!("degenerate_target={:?}", <[f64; 4]>::from(*b))),
            }
        }
        (OcclusionPlan { alpha: cfg.alpha, targets, period: cfg.bom_period, space: cfg.bom_space }, occ)
    });

    let z0_input = ctx.backends.autoencoder.encode(&image)?;
    let mask = InpaintMask::from_boxes(cond.boxes(), s, s, ctx.factor).map_err(SkipReason::from)?;
    let sampler = cfg.sampler(image_seed(cfg.seed, id, 2));
    let every_step = matches!(&plan, Some((p, _)) if p.period == Period::EveryStep && p.space == Space::Latent);
    if cfg.bom_period == Period::EveryStep && cfg.bom_space == Space::Pixel {
        flags.push("every_step_pixel_applied_once".into());
    }
    let out = match (&plan, every_step) {
        (Some((p, o)), true) => {
            let mut hook = EveryStepOcclusion { plan: p, occ: o };
            run_sampling_with(&z0_input, &mask, &cond, &sampler, ctx.backends.denoiser.as_ref(), &mut hook)
        }
        _ => run_sampling_with(&z0_input, &mask, &cond, &sampler, ctx.backends.denoiser.as_ref(), &mut NoHook),
    }
    .map_err(SkipReason::from)?;

    // Refinement sees the original (pre-occlusion) result.
    let original = ctx.backends.autoencoder.decode(&out.latent)?;
    let seg_backend = ctx.backends.segmenter.as_ref();
    let mut entities = Vec::with_capacity(cond.entities.len());
    for (ent, att) in cond.entities.iter().zip(&out.attention) {
        let mut eflags = Vec::new();
        if att.degenerate {
            eflags.push("constant_attention".to_string());
        }
        let region = discriminative_region(att, &ent.bbox, seg_backend)?;
        if region.fallback {
            eflags.push("region_fallback".into());
        }
        let sample = match cfg.points {
            PointStrategy::Mps => mps_sample(&region, att, cfg.divisions),
            PointStrategy::Topk(k) => topk_sample(&region, att, k),
        };
        if sample.truncated {
            eflags.push("mps_truncated".into());
        }
        if sample.missing_background {
            eflags.push("no_background_point".into());
        }
        let prompt = PromptSet { points: sample.points, bbox: ent.bbox };
        let refined = refine_annotation(&original, &prompt, seg_backend)?;
        if refined.fallback {
            eflags.push("refine_fallback".into());
        }
        entities.push(EntityOutcome {
            class_name: ent.entity_text.clone(),
            grounding_box: ent.bbox,
            refined_box: refined.bbox,
            points: prompt.points,
            flags: eflags,
        });
    }

    // The hidden result is what ships.
    let bom_err = |e: BomError| SkipReason::Backend(format!("occlusion: {e}"));
    let (hidden_latent, hidden) = match (&plan, cfg.bom_space, every_step) {
        (Some(_), _, true) | (None, _, _) => (out.latent.clone(), original.clone()),
        (Some((p, o)), Space::Latent, false) => {
            let z = recombine(&out.latent, p, o).map_err(bom_err)?;
            let img = ctx.backends.autoencoder.decode(&z)?;
            (z, img)
        }
        (Some((p, o)), Space::Pixel, false) => {
            (out.latent.clone(), occlude_pixel_space(&original, p, o, ctx.factor).map_err(bom_err)?)
        }
    };

    let annotations: Vec<BoxAnnotation> = match cfg.mode {
        Mode::Mod => entities.iter().map(|e| BoxAnnotation::new(id, e.class_name.as_str(), e.refined_box)).collect(),
        Mode::Add => scaled
            .iter()
            .cloned()
            .chain(entities.iter().map(|e| BoxAnnotation::new(id, e.class_name.as_str(), e.refined_box)))
            .collect(),
    };
    let png = encode_png(&hidden).map_err(|e| SkipReason::ImageLoad(e.to_string()))?;
    let mut debug = Vec::new();
    if cfg.debug {
        debug.push((format!("{id}.z0_input.xten"), z0_input));
        debug.push((format!("{id}.z0.xten"), out.latent.clone()));
        debug.push((format!("{id}.z0_hidden.xten"), hidden_latent));
        for (i, a) in out.attention.iter().enumerate() {
            debug.push((format!("{id}.attention{i}.xten"), a.map.clone()));
        }
    }
    let status = ImageStatus::Generated {
        entities,
        occluder: plan.as_ref().map(|(_, o)| o.pixel_box),
        targets: plan.as_ref().map(|(p, _)| p.targets.clone()).unwrap_or_default(),
        image_sha256: sha256_hex(&png),
    };
    Ok((GeneratedImage { record: synth_rec, annotations, image: hidden, debug }, status, flags))
}

fn conventions() -> BTreeMap<String, String> {
    [
        ("attention_resolution", "pixel; latent maps averaged over steps, min-max normalized, nearest-upsampled"),
        ("mask_polarity", "1 = known region kept from the input latent"),
        ("mod_entity_cap", "none"),
        ("box_frame", "synthesis canvas pixels, [x1, y1, x2, y2]"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Runs the pipeline over every image of `ds`.
pub fn run_xsyn(
    ds: &DetectionDataset,
    source: &dyn ImageSource,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let manifest = backends.manifest()?;
    manifest.validate()?;
    let factor = manifest.downscale;
    if !cfg.synth_size.is_multiple_of(factor) {
        return Err(PipelineError::Config(format!(
            "synthesis size {} is not a multiple of the latent downscale {factor}",
            cfg.synth_size
        )));
    }
    let groups = match (&cfg.groups, cfg.mode) {
        (Some(g), _) => Some(g.clone()),
        (None, Mode::Add) => Some(build_class_groups(&mean_area_per_class(ds), cfg.boundaries)?),
        (None, Mode::Mod) => None,
    };
    if cfg.mode == Mode::Add {
        let without = ds.classes_without_annotations();
        if !without.is_empty() && cfg.groups.is_none() {
            log::warn!("classes without annotations are left out of grouping: {}", without.join(", "));
        }
    }
    let ctx = Context { cfg, backends, groups, factor };

    let work = |rec: &ImageRecord| -> (Done, f64) {
        let t0 = Instant::now();
        let anns: Vec<BoxAnnotation> = ds.annotations_for(&rec.id).cloned().collect();
        let done = match process_image(&ctx, source, rec, &anns) {
            Ok((output, status, flags)) => {
                Done { entry: ImageEntry { image_id: rec.id.0.clone(), status, flags }, output: Some(output) }
            }
            Err(reason) => {
                log::info!("skipping {}: {reason}", rec.id);
                Done {
                    entry: ImageEntry {
                        image_id: rec.id.0.clone(),
                        status: ImageStatus::Skipped { reason },
                        flags: Vec::new(),
                    },
                    output: None,
                }
            }
        };
        (done, t0.elapsed().as_secs_f64())
    };
    let results: Vec<(Done, f64)> = if cfg.jobs == 1 {
        ds.images.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        pool.install(|| ds.images.par_iter().map(work).collect())
    };

    let mut timing = Timing::default();
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (done, secs) in results {
        timing.per_image_seconds.insert(done.entry.image_id.clone(), secs);
        entries.push(done.entry);
        images.extend(done.output);
    }
    let dataset = DetectionDataset::new(
        images.iter().map(|g| g.record.clone()).collect(),
        images.iter().flat_map(|g| g.annotations.iter().cloned()).collect(),
        ds.class_names.clone(),
    )?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        backend_id: manifest.backend_id.clone(),
        backend_manifest_sha256: manifest.digest(),
        conventions: conventions(),
        entries,
        annotations_sha256: sha256_hex(dataset.to_canonical_json().as_bytes()),
    };
    timing.total_seconds = started.elapsed().as_secs_f64();
    Ok(RunOutput { dataset, manifest, images, timing })
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn generated(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e.status, ImageStatus::Generated { .. })).count()
    }
}

impl RunOutput {
    /// Writes `images/*.png`, `annotations.json`, `manifest.json` and, if
    /// present, `debug/*.xten` under `out`.
    pub fn write(&self, out: impl AsRef<Path>) -> Result<(), PipelineError> {
        let out = out.as_ref();
        let img_dir = out.join("images");
        std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        for g in &self.images {
            let p = img_dir.join(&g.record.file_name);
            std::fs::write(&p, encode_png(&g.image)?).map_err(io_err(&p))?;
            if !g.debug.is_empty() {
                let dbg = out.join("debug");
                std::fs::create_dir_all(&dbg).map_err(io_err(&dbg))?;
                for (name, t) in &g.debug {
                    let p = dbg.join(name);
                    t.save_xten(&p).map_err(io_err(&p))?;
                }
            }
        }
        self.dataset.save(out.join("annotations.json"))?;
        let p = out.join("manifest.json");
        std::fs::write(&p, self.manifest.to_json()).map_err(io_err(&p))?;
        Ok(())
    }
}

/// Loads a dataset and its PNGs, runs the pipeline and writes the output tree.
pub fn generate(
    annotations: &Path,
    images_dir: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<RunOutput, PipelineError> {
    let ds = crate::dataset::load_dataset(annotations)?;
    let result = run_xsyn(&ds, &PngDir(images_dir.to_path_buf()), cfg, backends)?;
    result.write(out)?;
    Ok(result)
}
