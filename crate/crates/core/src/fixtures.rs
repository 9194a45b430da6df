//! Planted-shape corpora: synthetic bag scans with known ground truth.
//!
//! Every image is rendered from a [`Scene`]: a bright background, a mid-grey
//! bag, lighter clutter segments (idle regions and occluder candidates) and
//! dark items carrying the annotated classes. The scene list doubles as the
//! oracle segmenter's fixture file, so automatic segmentation is exact.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::{Scene, SceneShape};
use crate::dataset::{BoxAnnotation, DetectionDataset, ImageRecord};
use crate::geometry::BBox;
use crate::imageio::{save_png, ImageIoError};
use crate::pipeline::ImageSource;
use crate::tensor::Tensor;

pub const BACKGROUND: f32 = 0.9;
pub const BAG: f32 = 0.7;
pub const CLUTTER: f32 = 0.6;
pub const ITEM: f32 = 0.2;

pub const CLASSES: [&str; 12] = [
    "Baton",
    "Bullet",
    "Gun",
    "Hammer",
    "HandCuffs",
    "Knife",
    "Lighter",
    "Pliers",
    "Powerbank",
    "Scissors",
    "Sprayer",
    "Wrench",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dataset: DetectionDataset,
    pub scenes: Vec<Scene>,
}

/// File locations of a corpus written by [`Corpus::write`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub annotations: PathBuf,
    pub images: PathBuf,
    pub scenes: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

struct SceneBuilder {
    id: String,
    width: u32,
    height: u32,
    shapes: Vec<SceneShape>,
    annotations: Vec<BoxAnnotation>,
}

impl SceneBuilder {
    fn new(id: &str, width: u32, height: u32, bag: BBox) -> Self {
        let full = BBox::new(0.0, 0.0, width as f64, height as f64);
        SceneBuilder {
            id: id.into(),
            width,
            height,
            shapes: vec![SceneShape::rect(full, BACKGROUND), SceneShape::rect(bag, BAG)],
            annotations: Vec::new(),
        }
    }

    fn clutter(mut self, shape: SceneShape) -> Self {
        self.shapes.push(shape);
        self
    }

    fn item(mut self, class: &str, shape: SceneShape) -> Self {
        self.annotations.push(BoxAnnotation::new(self.id.as_str(), class, shape.bbox));
        self.shapes.push(shape.labeled(class));
        self
    }

    fn finish(self) -> (ImageRecord, Vec<BoxAnnotation>, Scene) {
        let rec = ImageRecord::new(self.id.as_str(), self.width, self.height, format!("{}.png", self.id));
        let scene = Scene { id: self.id, width: self.width, height: self.height, shapes: self.shapes };
        (rec, self.annotations, scene)
    }
}

fn assemble(parts: Vec<(ImageRecord, Vec<BoxAnnotation>, Scene)>) -> Corpus {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut scenes = Vec::new();
    for (r, a, s) in parts {
        images.push(r);
        annotations.extend(a);
        scenes.push(s);
    }
    let classes = CLASSES.iter().map(|s| s.to_string()).collect();
    let dataset = DetectionDataset::new(images, annotations, classes).expect("fixture dataset is valid");
    Corpus { dataset, scenes }
}

fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2)
}

/// Three hand-laid bags; the second is 640×480 so the pipeline has to resize.
/// The first carries a sub-threshold box that small-box filtering removes.
pub fn three_image_corpus() -> Corpus {
    assemble(vec![
        SceneBuilder::new("bag-001", 512, 512, r(40.0, 40.0, 472.0, 472.0))
            .clutter(SceneShape::rect(r(300.0, 60.0, 420.0, 150.0), CLUTTER))
            .clutter(SceneShape::ellipse(r(80.0, 330.0, 200.0, 440.0), CLUTTER))
            .item("Knife", SceneShape::rect(r(80.0, 80.0, 200.0, 140.0), ITEM))
            .item("Gun", SceneShape::rect(r(260.0, 260.0, 400.0, 360.0), ITEM))
            .item("Bullet", SceneShape::rect(r(420.0, 420.0, 430.0, 432.0), ITEM))
            .finish(),
        SceneBuilder::new("bag-002", 640, 480, r(30.0, 30.0, 610.0, 450.0))
            .clutter(SceneShape::rect(r(420.0, 60.0, 560.0, 170.0), CLUTTER))
            .clutter(SceneShape::ellipse(r(60.0, 300.0, 180.0, 420.0), CLUTTER))
            .item("Hammer", SceneShape::rect(r(200.0, 120.0, 380.0, 300.0), ITEM))
            .item("Lighter", SceneShape::ellipse(r(450.0, 300.0, 500.0, 340.0), ITEM))
            .finish(),
        SceneBuilder::new("bag-003", 512, 512, r(48.0, 48.0, 464.0, 464.0))
            .clutter(SceneShape::rect(r(320.0, 80.0, 440.0, 200.0), CLUTTER))
            .item("Scissors", SceneShape::rect(r(100.0, 100.0, 220.0, 180.0), ITEM))
            .item("Wrench", SceneShape::ellipse(r(300.0, 280.0, 420.0, 400.0), ITEM))
            .finish(),
    ])
}

/// A bag packed with items only: no segment qualifies as an idle region.
pub fn no_idle_corpus() -> Corpus {
    assemble(vec![SceneBuilder::new("bag-full", 512, 512, r(40.0, 40.0, 472.0, 472.0))
        .item("Knife", SceneShape::rect(r(60.0, 60.0, 240.0, 240.0), ITEM))
        .item("Gun", SceneShape::rect(r(270.0, 270.0, 450.0, 450.0), ITEM))
        .finish()])
}

fn random_box<R: Rng>(rng: &mut R, area: &BBox, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max).min(area.width());
    let h = rng.random_range(min..max).min(area.height());
    let x = rng.random_range(area.x1..=area.x2 - w).round();
    let y = rng.random_range(area.y1..=area.y2 - h).round();
    BBox::new(x, y, x + w.round(), y + h.round())
}

fn separated(b: &BBox, others: &[BBox], gap: f64) -> bool {
    let g = BBox::new(b.x1 - gap, b.y1 - gap, b.x2 + gap, b.y2 + gap);
    others.iter().all(|o| g.intersection_area(o) == 0.0)
}

/// `n` random square bags of side `size`, each with 1–3 items and 1–3 clutter
/// segments, all pairwise separated.
pub fn random_corpus(n: usize, size: u32, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let parts = (0..n)
        .map(|i| {
            let bag = r(s * 0.06, s * 0.06, s * 0.94, s * 0.94);
            let inner = r(bag.x1 + 4.0, bag.y1 + 4.0, bag.x2 - 4.0, bag.y2 - 4.0);
            let mut b = SceneBuilder::new(&format!("rand-{i:03}"), size, size, bag);
            let mut placed: Vec<BBox> = Vec::new();
            let mut place = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                for _ in 0..200 {
                    let c = random_box(rng, &inner, lo, hi);
                    if separated(&c, &placed, 6.0) {
                        placed.push(c);
                        return Some(c);
                    }
                }
                None
            };
            for _ in 0..rng.random_range(1..=3) {
                if let Some(c) = place(&mut rng, s * 0.1, s * 0.3) {
                    let class = CLASSES[rng.random_range(0..CLASSES.len())];
                    let shape =
                        if rng.random_bool(0.5) { SceneShape::rect(c, ITEM) } else { SceneShape::ellipse(c, ITEM) };
                    b = b.item(class, shape);
                }
            }
            for _ in 0..rng.random_range(1..=3) {
                if let Some(c) = place(&mut rng, s * 0.12, s * 0.25) {
                    b = b.clutter(SceneShape::rect(c, CLUTTER));
                }
            }
            b.finish()
        })
        .collect();
    assemble(parts)
}

impl Corpus {
    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// Renders one image at its native size.
    pub fn render(&self, id: &str) -> Option<Tensor> {
        self.scene(id).map(|s| s.render(s.height as usize, s.width as usize))
    }

    /// Writes `annotations.json`, `scenes.json` and `images/*.png` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<CorpusPaths, FixtureError> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        std::fs::create_dir_all(&images)?;
        for rec in &self.dataset.images {
            let img = self.render(&rec.id.0).expect("every image has a scene");
            save_png(images.join(&rec.file_name), &img)?;
        }
        let annotations = dir.join("annotations.json");
        self.dataset.save(&annotations)?;
        let scenes = dir.join("scenes.json");
        let mut text = serde_json::to_string_pretty(&self.scenes).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(&scenes, text)?;
        Ok(CorpusPaths { annotations, images, scenes })
    }
}

impl ImageSource for Corpus {
    fn load(&self, record: &ImageRecord) -> Result<Tensor, String> {
        self.render(&record.id.0).ok_or_else(|| format!("no scene for {}", record.id))
    }
}
