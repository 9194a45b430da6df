//! Oracle segmenter over planted-shape scenes.
//!
//! Automatic mode returns the exact masks of the shapes listed in a scene
//! descriptor (the fixture's ground truth), largest first. Prompt mode
//! thresholds the request image into foreground and labels 4-connected
//! components. Single-channel inputs are saliency maps where bright is
//! foreground; three-channel inputs are transmission images where dark is
//! foreground. The components hit by foreground points are kept (or, with no
//! usable point, the one overlapping the prompt box most) and the component
//! under the background point is removed.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, SegmentMode, SegmentRequest, SegmenterBackend};
use crate::car::Polarity;
use crate::geometry::BBox;
use crate::grounding::{SegMask, SegmentationResult};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub bbox: BBox,
    /// Grey level in `[0, 1]` used when rendering.
    pub intensity: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl SceneShape {
    pub fn rect(bbox: BBox, intensity: f32) -> Self {
        SceneShape { kind: ShapeKind::Rect, bbox, intensity, label: None }
    }

    pub fn ellipse(bbox: BBox, intensity: f32) -> Self {
        SceneShape { kind: ShapeKind::Ellipse, bbox, intensity, label: None }
    }

    pub fn labeled(mut self, label: &str) -> Self {
        self.label = Some(label.to_owned());
        self
    }

    fn covers(&self, b: &BBox, px: f64, py: f64) -> bool {
        match self.kind {
            ShapeKind::Rect => b.contains_point(px, py),
            ShapeKind::Ellipse => {
                let (cx, cy) = b.center();
                let (rx, ry) = (b.width() * 0.5, b.height() * 0.5);
                ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) < 1.0
            }
        }
    }

    /// Binary `[h, w]` mask of the shape with scene coordinates scaled by `(sx, sy)`.
    pub fn rasterize(&self, h: usize, w: usize, sx: f64, sy: f64) -> Tensor {
        let b = self.bbox.scale(sx, sy);
        let (cols, rows) = (b.col_span(w), b.row_span(h));
        let mut t = Tensor::zeros(&[h, w]);
        let data = t.data_mut();
        for y in rows {
            for x in cols.clone() {
                if self.covers(&b, x as f64 + 0.5, y as f64 + 0.5) {
                    data[y * w + x] = 1.0;
                }
            }
        }
        t
    }
}

/// A planted-shape scene. Shapes are painted in order, later on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<SceneShape>,
}

impl Scene {
    /// Renders the scene as an `[h, w, 3]` grey image.
    pub fn render(&self, h: usize, w: usize) -> Tensor {
        let (sx, sy) = (w as f64 / self.width as f64, h as f64 / self.height as f64);
        let mut grey = vec![0f32; h * w];
        for s in &self.shapes {
            let m = s.rasterize(h, w, sx, sy);
            for (g, &v) in grey.iter_mut().zip(m.data()) {
                if v > 0.5 {
                    *g = s.intensity;
                }
            }
        }
        Tensor::from_fn3(h, w, 3, |y, x, _| grey[y * w + x])
    }
}

pub fn load_scenes(path: impl AsRef<Path>) -> std::io::Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[derive(Debug, Clone, Default)]
pub struct OracleSegmenter {
    scenes: HashMap<String, Scene>,
}

impl OracleSegmenter {
    pub fn new(scenes: impl IntoIterator<Item = Scene>) -> Self {
        OracleSegmenter { scenes: scenes.into_iter().map(|s| (s.id.clone(), s)).collect() }
    }

    pub fn from_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::new(load_scenes(path)?))
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.get(id)
    }

    fn segment_auto(&self, req: &SegmentRequest) -> Result<SegmentationResult, BackendError> {
        let id =
            req.scene.as_deref().ok_or_else(|| BackendError::MissingScene("request carries no scene id".into()))?;
        let scene =
            self.scenes.get(id).ok_or_else(|| BackendError::MissingScene(format!("no fixture for scene {id:?}")))?;
        let (h, w, _) = req.image.hwc()?;
        let (sx, sy) = (w as f64 / scene.width as f64, h as f64 / scene.height as f64);
        let mut masks: Vec<SegMask> = scene
            .shapes
            .iter()
            .map(|s| SegMask::from_mask(s.rasterize(h, w, sx, sy)))
            .filter(|m| !m.is_empty())
            .collect();
        // Stable sort keeps scene order among equal areas.
        masks.sort_by_key(|m| std::cmp::Reverse(m.area));
        Ok(SegmentationResult { masks })
    }

    fn segment_prompt(&self, req: &SegmentRequest) -> Result<SegmentationResult, BackendError> {
        let prompt =
            req.prompt.as_ref().ok_or_else(|| BackendError::BadRequest("prompt mode without a prompt".into()))?;
        let (h, w, c) = req.image.hwc()?;
        let data = req.image.data();
        let fg: Vec<bool> = (0..h * w)
            .map(|i| {
                if c == 1 {
                    data[i] >= 0.5
                } else {
                    let s: f32 = data[i * c..i * c + c].iter().sum();
                    s / (c as f32) < 0.5
                }
            })
            .collect();
        let labels = label_components(&fg, h, w);
        let n_labels = labels.iter().flatten().max().map_or(0, |m| m + 1);

        let label_at = |x: f64, y: f64| -> Option<usize> {
            if x < 0.0 || y < 0.0 {
                return None;
            }
            let (xi, yi) = (x.floor() as usize, y.floor() as usize);
            if xi >= w || yi >= h {
                return None;
            }
            labels[yi * w + xi]
        };

        let mut keep = vec![false; n_labels];
        let mut any = false;
        for p in prompt.points.iter().filter(|p| p.polarity == Polarity::Foreground) {
            if let Some(l) = label_at(p.x, p.y) {
                keep[l] = true;
                any = true;
            }
        }
        if !any {
            let mut overlap = vec![0usize; n_labels];
            let b = prompt.bbox;
            for y in b.row_span(h) {
                for x in b.col_span(w) {
                    if let Some(l) = labels[y * w + x] {
                        overlap[l] += 1;
                    }
                }
            }
            // Ties go to the lowest label.
            if let Some((best, &n)) = overlap.iter().enumerate().rev().max_by_key(|(_, &n)| n) {
                if n > 0 {
                    keep[best] = true;
                }
            }
        }
        // A background point vetoes a component only when no foreground point
        // chose it: positive evidence wins a conflicting prompt.
        let chosen: Vec<bool> = (0..n_labels)
            .map(|l| prompt.points.iter().any(|p| p.polarity == Polarity::Foreground && label_at(p.x, p.y) == Some(l)))
            .collect();
        for p in prompt.points.iter().filter(|p| p.polarity == Polarity::Background) {
            if let Some(l) = label_at(p.x, p.y) {
                keep[l] = keep[l] && chosen[l];
            }
        }
        let mask = Tensor::new(vec![h, w], labels.iter().map(|l| l.is_some_and(|l| keep[l]) as u8 as f32).collect())?;
        Ok(SegmentationResult { masks: vec![SegMask::from_mask(mask)] })
    }
}

/// 4-connected component labels in raster order of first pixel.
fn label_components(fg: &[bool], h: usize, w: usize) -> Vec<Option<usize>> {
    let mut labels = vec![None; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(next);
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && labels[j].is_none() {
                    labels[j] = Some(next);
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        next += 1;
    }
    labels
}

impl SegmenterBackend for OracleSegmenter {
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentationResult, BackendError> {
        match req.mode {
            SegmentMode::Auto => self.segment_auto(req),
            SegmentMode::Prompt => self.segment_prompt(req),
        }
    }
}
