//! COCO-style manifest shared by synthesis, tiling and evaluation.
//!
//! `annotations.json` carries images, taxonomy-aware categories and per-instance
//! RLE masks; `detections.json` is a bare array of scored predictions. Both are
//! written compactly with a fixed key order, so equal sets produce equal bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::{InstanceMask, RasterError};
use crate::taxonomy::Rank;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {}", .violations.first().map(ToString::to_string).unwrap_or_default())]
    Invalid {
        path: String,
        violations: Vec<Violation>,
    },
    #[error("detection {id}: {reason}")]
    BadDetection { id: u64, reason: String },
}

/// Uncompressed COCO RLE: `size` is `[height, width]`, counts are column-major
/// and start with a zero-run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn to_mask(&self) -> Result<InstanceMask, RasterError> {
        InstanceMask::from_counts(self.size[0], self.size[1], self.counts.clone())
    }
}

impl From<&InstanceMask> for Rle {
    fn from(m: &InstanceMask) -> Self {
        Rle {
            size: [m.height(), m.width()],
            counts: m.counts().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Number of individuals placed when synthesizing this image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placements: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub rank: Rank,
    pub parent_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub segmentation: Rle,
    /// `[x, y, w, h]`, tight over set pixels.
    pub bbox: [u32; 4],
    pub area: u64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_fraction: Option<f64>,
}

impl Annotation {
    /// Builds a sound annotation from a mask; bbox and area come from the mask.
    pub fn from_mask(id: u64, image_id: u64, category_id: u32, mask: &InstanceMask) -> Self {
        Annotation {
            id,
            image_id,
            category_id,
            segmentation: mask.into(),
            bbox: mask.bbox(),
            area: mask.area(),
            iscrowd: 0,
            visible_fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            tool: "planksynth".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            config_digest: None,
            config: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub info: Provenance,
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Annotations grouped by image id.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

/// One invariant violation found by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DuplicateImageId(u64),
    DuplicateCategoryId(u32),
    DuplicateAnnotationId(u64),
    DanglingImage { annotation: u64, image_id: u64 },
    DanglingCategory { annotation: u64, category_id: u32 },
    MalformedRle { annotation: u64, reason: String },
    FrameMismatch { annotation: u64, rle: [u32; 2], image: [u32; 2] },
    AreaMismatch { annotation: u64, stored: u64, actual: u64 },
    BboxMismatch { annotation: u64, stored: [u32; 4], actual: [u32; 4] },
    EmptyMask { annotation: u64 },
    Crowd { annotation: u64 },
    VisibleFraction { annotation: u64, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateImageId(id) => write!(f, "image {id}: duplicate id"),
            DuplicateCategoryId(id) => write!(f, "category {id}: duplicate id"),
            DuplicateAnnotationId(id) => write!(f, "annotation {id}: duplicate id"),
            DanglingImage { annotation, image_id } => {
                write!(f, "annotation {annotation}: image_id {image_id} does not exist")
            }
            DanglingCategory { annotation, category_id } => {
                write!(f, "annotation {annotation}: category_id {category_id} does not exist")
            }
            MalformedRle { annotation, reason } => {
                write!(f, "annotation {annotation}: malformed RLE: {reason}")
            }
            FrameMismatch { annotation, rle, image } => write!(
                f,
                "annotation {annotation}: RLE frame {}x{} differs from image {}x{}",
                rle[0], rle[1], image[0], image[1]
            ),
            AreaMismatch { annotation, stored, actual } => {
                write!(f, "annotation {annotation}: area {stored} but mask has {actual} pixels")
            }
            BboxMismatch { annotation, stored, actual } => {
                write!(f, "annotation {annotation}: bbox {stored:?} but mask bbox is {actual:?}")
            }
            EmptyMask { annotation } => write!(f, "annotation {annotation}: empty mask"),
            Crowd { annotation } => write!(f, "annotation {annotation}: iscrowd must be 0"),
            VisibleFraction { annotation, value } => {
                write!(f, "annotation {annotation}: visible_fraction {value} outside (0, 1]")
            }
        }
    }
}

/// Returns every invariant violation in `aset`; empty means sound.
pub fn validate(aset: &AnnotationSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut images = BTreeMap::new();
    for img in &aset.images {
        if images.insert(img.id, img).is_some() {
            out.push(Violation::DuplicateImageId(img.id));
        }
    }
    let mut cats = BTreeSet::new();
    for c in &aset.categories {
        if !cats.insert(c.id) {
            out.push(Violation::DuplicateCategoryId(c.id));
        }
    }
    let mut ann_ids = BTreeSet::new();
    for a in &aset.annotations {
        if !ann_ids.insert(a.id) {
            out.push(Violation::DuplicateAnnotationId(a.id));
        }
        let image = images.get(&a.image_id);
        if image.is_none() {
            out.push(Violation::DanglingImage {
                annotation: a.id,
                image_id: a.image_id,
            });
        }
        if !cats.contains(&a.category_id) {
            out.push(Violation::DanglingCategory {
                annotation: a.id,
                category_id: a.category_id,
            });
        }
        if a.iscrowd != 0 {
            out.push(Violation::Crowd { annotation: a.id });
        }
        if let Some(v) = a.visible_fraction {
            if !(v > 0.0 && v <= 1.0) {
                out.push(Violation::VisibleFraction {
                    annotation: a.id,
                    value: v,
                });
            }
        }
        if let Some(img) = image {
            if a.segmentation.size != [img.height, img.width] {
                out.push(Violation::FrameMismatch {
                    annotation: a.id,
                    rle: a.segmentation.size,
                    image: [img.height, img.width],
                });
            }
        }
        match a.segmentation.to_mask() {
            Err(e) => out.push(Violation::MalformedRle {
                annotation: a.id,
                reason: match e {
                    RasterError::MalformedMask(r) => r,
                    other => other.to_string(),
                },
            }),
            Ok(mask) => {
                if mask.area() != a.area {
                    out.push(Violation::AreaMismatch {
                        annotation: a.id,
                        stored: a.area,
                        actual: mask.area(),
                    });
                }
                if mask.bbox() != a.bbox {
                    out.push(Violation::BboxMismatch {
                        annotation: a.id,
                        stored: a.bbox,
                        actual: mask.bbox(),
                    });
                }
                if mask.is_empty() {
                    out.push(Violation::EmptyMask { annotation: a.id });
                }
            }
        }
    }
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    std::fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_manifest(aset: &AnnotationSet, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_bytes(path.as_ref(), &aset.to_bytes())
}

/// Reads and validates a manifest; any violation rejects the file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<AnnotationSet, DatasetError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    parse_manifest(&bytes).map_err(|e| match e {
        DatasetError::Json { source, .. } => DatasetError::Json {
            path: path.display().to_string(),
            source,
        },
        DatasetError::Invalid { violations, .. } => DatasetError::Invalid {
            path: path.display().to_string(),
            violations,
        },
        other => other,
    })
}

pub fn parse_manifest(bytes: &[u8]) -> Result<AnnotationSet, DatasetError> {
    let aset: AnnotationSet = serde_json::from_slice(bytes).map_err(|source| DatasetError::Json {
        path: "<memory>".into(),
        source,
    })?;
    let violations = validate(&aset);
    if !violations.is_empty() {
        return Err(DatasetError::Invalid {
            path: "<memory>".into(),
            violations,
        });
    }
    Ok(aset)
}

/// A scored predicted instance. `id` orders score ties; files may omit it,
/// in which case it is the 1-based position in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub segmentation: Rle,
    pub score: f64,
}

impl Detection {
    pub fn from_mask(id: u64, image_id: u64, category_id: u32, mask: &InstanceMask, score: f64) -> Self {
        Detection {
            id,
            image_id,
            category_id,
            segmentation: mask.into(),
            score,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectionSet(pub Vec<Detection>);

impl DetectionSet {
    /// Fills in missing ids and checks ids are unique and scores lie in [0, 1].
    pub fn normalize(mut self) -> Result<Self, DatasetError> {
        for (i, d) in self.0.iter_mut().enumerate() {
            if d.id == 0 {
                d.id = i as u64 + 1;
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.0 {
            if !seen.insert(d.id) {
                return Err(DatasetError::BadDetection {
                    id: d.id,
                    reason: "duplicate id".into(),
                });
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(DatasetError::BadDetection {
                    id: d.id,
                    reason: format!("score {} outside [0, 1]", d.score),
                });
            }
            if let Err(e) = d.segmentation.to_mask() {
                return Err(DatasetError::BadDetection {
                    id: d.id,
                    reason: e.to_string(),
                });
            }
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("detections serialize");
        out.push(b'\n');
        out
    }

    /// Detections whose image id is absent from `aset`.
    pub fn unresolved_images(&self, aset: &AnnotationSet) -> Vec<u64> {
        let known: BTreeSet<u64> = aset.images.iter().map(|i| i.id).collect();
        let missing: BTreeSet<u64> = self
            .0
            .iter()
            .map(|d| d.image_id)
            .filter(|id| !known.contains(id))
            .collect();
        missing.into_iter().collect()
    }

    /// Ground truth replayed as score-1 detections.
    pub fn from_ground_truth(aset: &AnnotationSet) -> Self {
        DetectionSet(
            aset.annotations
                .iter()
                .map(|a| Detection {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    segmentation: a.segmentation.clone(),
                    score: 1.0,
                })
                .collect(),
        )
    }
}

pub fn write_detections(dets: &DetectionSet, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_bytes(path.as_ref(), &dets.to_bytes())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionSet, DatasetError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let dets: DetectionSet = serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    })?;
    dets.normalize()
}
