//! Detection datasets, their canonical JSON form, and the class-group tables
//! used to pick a category for an idle region.
//!
//! The on-disk format is a small COCO-like document:
//!
//! ```json
//! {
//!   "annotations": [{"bbox": [10.0, 10.0, 50.0, 50.0], "category": "Knife", "image_id": "a"}],
//!   "categories": ["Knife"],
//!   "images": [{"file_name": "a.png", "height": 512, "id": "a", "width": 512}]
//! }
//! ```
//!
//! Boxes are corner form. A document carrying `"bbox_format": "xywh"` is read
//! as COCO `[x, y, w, h]` and converted on ingestion; saving always writes
//! corner form with sorted keys.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("annotation file does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("image {id:?}: {reason}")]
    InvalidImage { id: String, reason: String },
    #[error("annotation #{index} references unknown image_id {image_id:?}")]
    UnknownImage { index: usize, image_id: String },
    #[error("annotation #{index} has category {category:?} which is not listed in categories")]
    UnknownCategory { index: usize, category: String },
    #[error("annotation #{index} on image {image_id:?} has an invalid box {bbox:?}: {reason}")]
    InvalidBox { index: usize, image_id: String, bbox: [f64; 4], reason: &'static str },
    #[error("unsupported bbox_format {0:?} (expected \"xyxy\" or \"xywh\")")]
    BoxFormat(String),
    #[error("class-group boundaries must be strictly increasing and finite, got ({0}, {1})")]
    Boundaries(f64, f64),
    #[error("class {0:?} appears in more than one group")]
    OverlappingGroups(String),
}

/// Image identifier. Integer ids in COCO-style inputs are kept as their decimal text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

impl<'de> Deserialize<'de> for ImageId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(u64),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Text(s) => ImageId(s),
            Raw::Int(i) => ImageId(i.to_string()),
        })
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, width: u32, height: u32, file_name: impl Into<String>) -> Self {
        ImageRecord { id: ImageId(id.into()), width, height, file_name: file_name.into() }
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: ImageId,
    #[serde(rename = "category")]
    pub class_name: String,
    #[serde(rename = "bbox")]
    pub bbox: BBox,
}

impl BoxAnnotation {
    pub fn new(image_id: impl Into<String>, class_name: impl Into<String>, bbox: BBox) -> Self {
        BoxAnnotation { image_id: ImageId(image_id.into()), class_name: class_name.into(), bbox }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<BoxAnnotation>,
    pub class_names: Vec<String>,
}

#[derive(Deserialize)]
struct RawDataset {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<String>,
    #[serde(default)]
    bbox_format: Option<String>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: ImageId,
    category: String,
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct CanonicalDataset<'a> {
    images: &'a [ImageRecord],
    annotations: &'a [BoxAnnotation],
    categories: &'a [String],
}

impl DetectionDataset {
    /// Builds a dataset and runs the same validation as [`load_dataset`].
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<BoxAnnotation>,
        class_names: Vec<String>,
    ) -> Result<Self, DatasetError> {
        let raw = annotations
            .into_iter()
            .map(|a| RawAnnotation { image_id: a.image_id, category: a.class_name, bbox: a.bbox.into() })
            .collect();
        validate(RawDataset { images, annotations: raw, categories: class_names, bbox_format: None })
    }

    pub fn from_json_str(text: &str) -> Result<Self, DatasetError> {
        validate(serde_json::from_str(text)?)
    }

    /// Canonical serialization: sorted keys, corner-form boxes, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let doc =
            CanonicalDataset { images: &self.images, annotations: &self.annotations, categories: &self.class_names };
        // `Value` objects are ordered maps, so this sorts every key.
        let value = serde_json::to_value(doc).expect("dataset serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_canonical_json())
            .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    pub fn image(&self, id: &ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|i| &i.id == id)
    }

    pub fn annotations_for<'a>(&'a self, id: &'a ImageId) -> impl Iterator<Item = &'a BoxAnnotation> + 'a {
        self.annotations.iter().filter(move |a| &a.image_id == id)
    }

    /// Classes listed in `categories` that no annotation uses.
    pub fn classes_without_annotations(&self) -> Vec<String> {
        let used: HashSet<&str> = self.annotations.iter().map(|a| a.class_name.as_str()).collect();
        self.class_names.iter().filter(|c| !used.contains(c.as_str())).cloned().collect()
    }
}

fn validate(raw: RawDataset) -> Result<DetectionDataset, DatasetError> {
    let xywh = match raw.bbox_format.as_deref() {
        None | Some("xyxy") => false,
        Some("xywh") => true,
        Some(other) => return Err(DatasetError::BoxFormat(other.to_owned())),
    };

    let mut dims: HashMap<&ImageId, (f64, f64)> = HashMap::new();
    for img in &raw.images {
        if img.width == 0 || img.height == 0 {
            return Err(DatasetError::InvalidImage {
                id: img.id.0.clone(),
                reason: format!("non-positive size {}x{}", img.width, img.height),
            });
        }
        if dims.insert(&img.id, (img.width as f64, img.height as f64)).is_some() {
            return Err(DatasetError::InvalidImage { id: img.id.0.clone(), reason: "duplicate image id".into() });
        }
    }

    let mut class_names = Vec::with_capacity(raw.categories.len());
    for c in &raw.categories {
        if !class_names.contains(c) {
            class_names.push(c.clone());
        }
    }
    let known: HashSet<&str> = class_names.iter().map(String::as_str).collect();

    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for (index, a) in raw.annotations.iter().enumerate() {
        let &(w, h) = dims
            .get(&a.image_id)
            .ok_or_else(|| DatasetError::UnknownImage { index, image_id: a.image_id.0.clone() })?;
        if a.category.is_empty() || !known.contains(a.category.as_str()) {
            return Err(DatasetError::UnknownCategory { index, category: a.category.clone() });
        }
        let [p, q, r, s] = a.bbox;
        let invalid = |reason| DatasetError::InvalidBox { index, image_id: a.image_id.0.clone(), bbox: a.bbox, reason };
        if !a.bbox.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        let bbox = if xywh { BBox::from_xywh(p, q, r, s) } else { BBox::new(p, q, r, s) };
        if !bbox.is_well_formed() {
            return Err(invalid("requires x1 < x2 and y1 < y2"));
        }
        let bbox = bbox.clamp_to(w, h);
        if !bbox.is_well_formed() {
            return Err(invalid("empty after clamping to the image"));
        }
        annotations.push(BoxAnnotation { image_id: a.image_id.clone(), class_name: a.category.clone(), bbox });
    }

    Ok(DetectionDataset { images: raw.images, annotations, class_names })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DetectionDataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    DetectionDataset::from_json_str(&text)
}

/// Mean box area per class. Classes without annotations are absent.
pub fn mean_area_per_class(ds: &DetectionDataset) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for a in &ds.annotations {
        let e = acc.entry(a.class_name.clone()).or_insert((0.0, 0));
        e.0 += a.bbox.area();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

/// Three class groups split by mean area at `boundaries = (lo, hi)`.
///
/// Group membership uses half-open intervals `[0, lo)`, `[lo, hi)`, `[hi, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGroupTable {
    pub boundaries: (f64, f64),
    pub groups: [Vec<String>; 3],
}

impl ClassGroupTable {
    pub fn new(groups: [Vec<String>; 3], boundaries: (f64, f64)) -> Result<Self, DatasetError> {
        let (lo, hi) = boundaries;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
            return Err(DatasetError::Boundaries(lo, hi));
        }
        let mut seen = HashSet::new();
        for name in groups.iter().flatten() {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::OverlappingGroups(name.clone()));
            }
        }
        Ok(ClassGroupTable { boundaries, groups })
    }

    /// Group index (0, 1 or 2) for an area.
    pub fn group_for_area(&self, area: f64) -> usize {
        let (lo, hi) = self.boundaries;
        if area < lo {
            0
        } else if area < hi {
            1
        } else {
            2
        }
    }

    /// Distance from `area` to the interval covered by `group`.
    pub fn distance_to_group(&self, area: f64, group: usize) -> f64 {
        let (lo, hi) = self.boundaries;
        let (a, b) = match group {
            0 => (f64::NEG_INFINITY, lo),
            1 => (lo, hi),
            _ => (hi, f64::INFINITY),
        };
        if area < a {
            a - area
        } else if area >= b {
            area - b
        } else {
            0.0
        }
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().flatten().map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        let t: ClassGroupTable = serde_json::from_str(&text)?;
        ClassGroupTable::new(t.groups, t.boundaries)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&serde_json::to_value(self).expect("table serializes"))
            .expect("value serializes");
        s.push('\n');
        s
    }

    fn preset(groups: [&[&str]; 3], boundaries: (f64, f64)) -> Self {
        let groups = groups.map(|g| g.iter().map(|s| s.to_string()).collect());
        ClassGroupTable { boundaries, groups }
    }

    /// Published grouping for PIDray.
    pub fn pidray() -> Self {
        Self::preset(
            [
                &["Lighter", "Bullet"],
                &["Knife", "Gun", "Powerbank", "Wrench", "HandCuffs", "Baton", "Pliers", "Scissors", "Sprayer"],
                &["Hammer"],
            ],
            (10000.0, 25000.0),
        )
    }

    /// Published grouping for OPIXray.
    pub fn opixray() -> Self {
        Self::preset(
            [&["Multi-tool_Knife", "Folding_Knife"], &["Straight_Knife", "Utility_Knife"], &["Scissor"]],
            (10000.0, 15000.0),
        )
    }

    /// Published grouping for HiXray.
    pub fn hixray() -> Self {
        Self::preset(
            [
                &[
                    "Portable_Charger_1",
                    "Portable_Charger_2",
                    "Water",
                    "Mobile_Phone",
                    "Cosmetic",
                    "Nonmetallic_Lighter",
                ],
                &["Tablet"],
                &["Laptop"],
            ],
            (40000.0, 100000.0),
        )
    }
}

/// Partitions classes by mean area. Within a group, classes are ordered by name.
pub fn build_class_groups(
    means: &BTreeMap<String, f64>,
    boundaries: (f64, f64),
) -> Result<ClassGroupTable, DatasetError> {
    let mut groups: [Vec<String>; 3] = Default::default();
    let probe = ClassGroupTable::new(Default::default(), boundaries)?;
    for (name, &area) in means {
        groups[probe.group_for_area(area)].push(name.clone());
    }
    ClassGroupTable::new(groups, boundaries)
}

/// Keeps boxes whose area is at least `min_ratio` of the image area, preserving order.
pub fn filter_small_boxes(boxes: &[BoxAnnotation], image: &ImageRecord, min_ratio: f64) -> Vec<BoxAnnotation> {
    let threshold = min_ratio * image.area();
    boxes.iter().filter(|b| b.bbox.area() >= threshold).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_box_json() -> &'static str {
        r#"{"images":[{"id":"img0","width":512,"height":512,"file_name":"img0.png"}],
            "annotations":[{"image_id":"img0","category":"Knife","bbox":[10,10,50,50]}],
            "categories":["Knife"]}"#
    }

    #[test]
    fn empty_file_loads_empty() {
        let ds = DetectionDataset::from_json_str("{}").unwrap();
        assert!(ds.images.is_empty() && ds.annotations.is_empty() && ds.class_names.is_empty());
        let ds = DetectionDataset::from_json_str(r#"{"images":[],"annotations":[],"categories":[]}"#).unwrap();
        assert_eq!(ds, DetectionDataset::default());
    }

    #[test]
    fn single_box_round_trip() {
        let ds = DetectionDataset::from_json_str(one_box_json()).unwrap();
        assert_eq!((ds.images.len(), ds.annotations.len()), (1, 1));
        assert_eq!(ds.annotations[0].bbox, BBox::new(10.0, 10.0, 50.0, 50.0));
        let text = ds.to_canonical_json();
        let again = DetectionDataset::from_json_str(&text).unwrap();
        assert_eq!(again, ds);
        assert_eq!(again.to_canonical_json(), text);
    }

    #[test]
    fn unknown_image_is_named() {
        let text = r#"{"images":[{"id":"a","width":4,"height":4,"file_name":"a.png"}],
            "annotations":[{"image_id":"b","category":"Gun","bbox":[0,0,1,1]}],
            "categories":["Gun"]}"#;
        match DetectionDataset::from_json_str(text) {
            Err(DatasetError::UnknownImage { index: 0, image_id }) => assert_eq!(image_id, "b"),
            other => panic!("expected UnknownImage, got {other:?}"),
        }
    }

    #[test]
    fn rejects_inverted_box_and_unknown_category() {
        let bad_box = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "annotations":[{"image_id":1,"category":"Gun","bbox":[3,0,1,1]}],"categories":["Gun"]}"#;
        assert!(matches!(DetectionDataset::from_json_str(bad_box), Err(DatasetError::InvalidBox { index: 0, .. })));
        let bad_cat = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":"a.png"}],
            "annotations":[{"image_id":1,"category":"Axe","bbox":[0,0,1,1]}],"categories":["Gun"]}"#;
        assert!(matches!(DetectionDataset::from_json_str(bad_cat), Err(DatasetError::UnknownCategory { .. })));
    }

    #[test]
    fn xywh_is_converted_and_clamped() {
        let text = r#"{"bbox_format":"xywh","images":[{"id":7,"width":100,"height":80,"file_name":"x.png"}],
            "annotations":[{"image_id":7,"category":"Gun","bbox":[90,10,20,20]}],"categories":["Gun"]}"#;
        let ds = DetectionDataset::from_json_str(text).unwrap();
        assert_eq!(ds.images[0].id, ImageId::from("7"));
        assert_eq!(ds.annotations[0].bbox, BBox::new(90.0, 10.0, 100.0, 30.0));
    }

    #[test]
    fn mean_areas() {
        let img = ImageRecord::new("a", 100, 100, "a.png");
        let ds = DetectionDataset::new(
            vec![img],
            vec![
                BoxAnnotation::new("a", "Gun", BBox::new(0.0, 0.0, 3.0, 4.0)),
                BoxAnnotation::new("a", "Knife", BBox::new(0.0, 0.0, 10.0, 10.0)),
                BoxAnnotation::new("a", "Knife", BBox::new(0.0, 0.0, 10.0, 30.0)),
            ],
            vec!["Gun".into(), "Knife".into(), "Axe".into()],
        )
        .unwrap();
        let m = mean_area_per_class(&ds);
        assert_eq!(m["Gun"], 12.0);
        assert_eq!(m["Knife"], 200.0);
        assert!(!m.contains_key("Axe"));
        assert_eq!(ds.classes_without_annotations(), vec!["Axe".to_string()]);
    }

    #[test]
    fn class_groups_half_open() {
        let means: BTreeMap<String, f64> =
            [("A", 5000.0), ("B", 15000.0), ("C", 30000.0), ("D", 10000.0), ("E", 25000.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        let t = build_class_groups(&means, (10000.0, 25000.0)).unwrap();
        assert_eq!(t.groups[0], vec!["A"]);
        assert_eq!(t.groups[1], vec!["B", "D"]);
        assert_eq!(t.groups[2], vec!["C", "E"]);

        let small: BTreeMap<String, f64> = [("A".to_string(), 1.0), ("B".to_string(), 2.0)].into();
        let t = build_class_groups(&small, (10000.0, 25000.0)).unwrap();
        assert_eq!(t.groups[0].len(), 2);
        assert!(t.groups[1].is_empty() && t.groups[2].is_empty());

        assert!(build_class_groups(&small, (5.0, 5.0)).is_err());
    }

    #[test]
    fn filter_threshold() {
        let img = ImageRecord::new("a", 512, 512, "a.png");
        // 0.001 * 512 * 512 = 262.144
        let boxes = vec![
            BoxAnnotation::new("a", "Gun", BBox::new(0.0, 0.0, 10.0, 10.0)),
            BoxAnnotation::new("a", "Gun", BBox::new(0.0, 0.0, 20.0, 20.0)),
        ];
        let kept = filter_small_boxes(&boxes, &img, 0.001);
        assert_eq!(kept, vec![boxes[1].clone()]);
        assert_eq!(filter_small_boxes(&boxes, &img, 0.0), boxes);

        // OPIXray-sized image at 0.4%: 0.004 * 1225 * 954 = 4674.6
        let opix = ImageRecord::new("o", 1225, 954, "o.png");
        let b = vec![
            BoxAnnotation::new("o", "Scissor", BBox::new(0.0, 0.0, 68.0, 68.0)),
            BoxAnnotation::new("o", "Scissor", BBox::new(0.0, 0.0, 69.0, 69.0)),
        ];
        assert_eq!(filter_small_boxes(&b, &opix, 0.004), vec![b[1].clone()]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn filter_is_idempotent(sizes in proptest::collection::vec((1u32..100, 1u32..100), 0..20), r in 0.0f64..0.05) {
                let img = ImageRecord::new("a", 256, 256, "a.png");
                let boxes: Vec<_> = sizes.iter().map(|&(w, h)| {
                    BoxAnnotation::new("a", "Gun", BBox::new(0.0, 0.0, w as f64, h as f64))
                }).collect();
                let once = filter_small_boxes(&boxes, &img, r);
                prop_assert_eq!(filter_small_boxes(&once, &img, r), once);
            }

            #[test]
            fn grouping_partitions_and_ignores_order(mut entries in proptest::collection::vec((0u32..50, 0.0f64..40000.0), 0..30)) {
                let means: BTreeMap<String, f64> = entries.iter().map(|(k, v)| (format!("c{k}"), *v)).collect();
                let t = build_class_groups(&means, (10000.0, 25000.0)).unwrap();
                let total: usize = t.groups.iter().map(Vec::len).sum();
                prop_assert_eq!(total, means.len());
                for name in means.keys() {
                    prop_assert_eq!(t.groups.iter().filter(|g| g.contains(name)).count(), 1);
                }
                entries.reverse();
                let shuffled: BTreeMap<String, f64> = means.iter().rev().map(|(k, v)| (k.clone(), *v)).collect();
                prop_assert_eq!(build_class_groups(&shuffled, (10000.0, 25000.0)).unwrap(), t);
            }
        }
    }
}
