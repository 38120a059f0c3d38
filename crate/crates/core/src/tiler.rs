//! Overlapping tile plans for large images, and re-assembly of per-tile
//! detections in the full-image frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset_io::{Detection, DetectionSet};
use crate::evaluator::iou;
use crate::raster::{InstanceMask, Raster, RasterError};

#[derive(Debug, thiserror::Error)]
pub enum TileError {
    #[error("invalid tiling: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileOrigin {
    pub x: u32,
    pub y: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub image_width: u32,
    pub image_height: u32,
    pub tile: u32,
    pub overlap: u32,
    /// Effective tile extent; smaller than `tile` only when the image is.
    pub tile_width: u32,
    pub tile_height: u32,
    /// Sorted by `(x, y)`.
    pub tiles: Vec<TileOrigin>,
}

fn axis_origins(len: u32, tile: u32, stride: u32) -> Vec<u32> {
    if len <= tile {
        return vec![0];
    }
    let mut out = vec![0];
    let mut o = 0;
    while o + tile < len {
        o += stride;
        if o + tile > len {
            o = len - tile;
        }
        if out.last() != Some(&o) {
            out.push(o);
        }
    }
    out
}

impl TilePlan {
    pub fn stride(&self) -> u32 {
        self.tile - self.overlap
    }

    pub fn x_origins(&self) -> Vec<u32> {
        axis_origins(self.image_width, self.tile, self.stride())
    }

    pub fn y_origins(&self) -> Vec<u32> {
        axis_origins(self.image_height, self.tile, self.stride())
    }
}

/// Origins at multiples of `tile - overlap`, with a final origin clamped so
/// the last tile ends at the image border.
pub fn plan_tiles(image_w: u32, image_h: u32, tile: u32, overlap: u32) -> Result<TilePlan, TileError> {
    if tile <= overlap {
        return Err(TileError::Config(format!("tile {tile} must exceed overlap {overlap}")));
    }
    if image_w == 0 || image_h == 0 {
        return Err(TileError::Config(format!("image {image_w}x{image_h} is empty")));
    }
    let stride = tile - overlap;
    let xs = axis_origins(image_w, tile, stride);
    let ys = axis_origins(image_h, tile, stride);
    let tiles = xs
        .iter()
        .flat_map(|&x| ys.iter().map(move |&y| TileOrigin { x, y }))
        .collect();
    Ok(TilePlan {
        image_width: image_w,
        image_height: image_h,
        tile,
        overlap,
        tile_width: tile.min(image_w),
        tile_height: tile.min(image_h),
        tiles,
    })
}

pub fn crop_tile(img: &Raster, origin: TileOrigin, width: u32, height: u32) -> Raster {
    let c = img.channels() as usize;
    let mut data = Vec::with_capacity(width as usize * height as usize * c);
    for y in origin.y..origin.y + height {
        let start = img.index(origin.x, y);
        data.extend_from_slice(&img.data()[start..start + width as usize * c]);
    }
    Raster::from_raw(width, height, img.channels(), data).expect("tile inside image")
}

pub fn crop(img: &Raster, plan: &TilePlan) -> Result<Vec<(TileOrigin, Raster)>, TileError> {
    if img.width() != plan.image_width || img.height() != plan.image_height {
        return Err(TileError::Config(format!(
            "plan is for {}x{}, image is {}x{}",
            plan.image_width,
            plan.image_height,
            img.width(),
            img.height()
        )));
    }
    Ok(plan
        .tiles
        .iter()
        .map(|&o| (o, crop_tile(img, o, plan.tile_width, plan.tile_height)))
        .collect())
}

/// Re-embeds tile-frame detections into the full image frame.
pub fn lift_detections(dets: &DetectionSet, origin: TileOrigin, image_w: u32, image_h: u32) -> DetectionSet {
    DetectionSet(
        dets.0
            .iter()
            .map(|d| {
                let mask = d.segmentation.to_mask().expect("detections are normalized");
                let lifted = mask.reframe(image_h, image_w, origin.x as i64, origin.y as i64);
                Detection {
                    segmentation: (&lifted).into(),
                    ..d.clone()
                }
            })
            .collect(),
    )
}

/// Tile-frame view of full-frame detections. Detections with no pixel in
/// the tile are dropped.
pub fn crop_detections(dets: &DetectionSet, origin: TileOrigin, tile_w: u32, tile_h: u32) -> DetectionSet {
    DetectionSet(
        dets.0
            .iter()
            .filter_map(|d| {
                let mask = d.segmentation.to_mask().expect("detections are normalized");
                let cropped = mask.reframe(tile_h, tile_w, -(origin.x as i64), -(origin.y as i64));
                (!cropped.is_empty()).then(|| Detection {
                    segmentation: (&cropped).into(),
                    ..d.clone()
                })
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// A detection joins a cluster when its IoU with the cluster's seed is
    /// at least this.
    pub iou_merge_threshold: f64,
    /// It also joins when `|det ∩ cluster| / min(|det|, |cluster|)` reaches
    /// this, which catches tile-edge fragments of a larger object. `None`
    /// disables the test.
    pub containment_threshold: Option<f64>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            iou_merge_threshold: 0.5,
            containment_threshold: Some(0.9),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), TileError> {
        let ok = |t: f64| t > 0.0 && t <= 1.0;
        if !ok(self.iou_merge_threshold) || !self.containment_threshold.is_none_or(ok) {
            return Err(TileError::Config("merge thresholds must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

struct Cluster {
    id: u64,
    image_id: u64,
    category_id: u32,
    score: f64,
    seed: InstanceMask,
    union: InstanceMask,
}

fn containment(a: &InstanceMask, b: &InstanceMask) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller == 0 {
        return 0.0;
    }
    a.intersection_area(b).expect("same frame") as f64 / smaller as f64
}

fn by_score(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

fn merge_pass(dets: &[Detection], cfg: &MergeConfig) -> Vec<Detection> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for d in dets {
        let mask = d.segmentation.to_mask().expect("detections are normalized");
        let hit = clusters.iter_mut().find(|c| {
            c.union.same_frame(&mask)
                && (iou(&c.seed, &mask) >= cfg.iou_merge_threshold
                    || cfg
                        .containment_threshold
                        .is_some_and(|t| containment(&c.union, &mask) >= t))
        });
        match hit {
            Some(c) => c.union = c.union.union(&mask).expect("same frame"),
            None => clusters.push(Cluster {
                id: d.id,
                image_id: d.image_id,
                category_id: d.category_id,
                score: d.score,
                seed: mask.clone(),
                union: mask,
            }),
        }
    }
    clusters
        .into_iter()
        .map(|c| Detection::from_mask(c.id, c.image_id, c.category_id, &c.union, c.score))
        .collect()
}

/// Greedy score-ordered clustering. Each cluster keeps its seed's id,
/// category and score (the maximum) and emits the union of its members.
/// Passes repeat until no cluster absorbs another, so the result is a fixed
/// point. Output is sorted by score descending, ties by id.
pub fn merge_detections(dets: &DetectionSet, cfg: &MergeConfig) -> DetectionSet {
    let mut per_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in &dets.0 {
        per_image.entry(d.image_id).or_default().push(d.clone());
    }
    let mut out = Vec::with_capacity(dets.0.len());
    for (_, mut group) in per_image {
        group.sort_by(by_score);
        loop {
            let merged = merge_pass(&group, cfg);
            let done = merged.len() == group.len();
            group = merged;
            if done {
                break;
            }
        }
        out.extend(group);
    }
    out.sort_by(by_score);
    DetectionSet(out)
}
