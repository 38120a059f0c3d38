//! COCO-style instance-segmentation scoring.
//!
//! Per image and category, detections (sorted by score, ties by id) are
//! greedily matched to the unmatched ground truth with the highest mask IoU
//! at or above the threshold. Ground truths outside the active size bucket
//! are ignored: they can absorb a detection but count neither as TP nor as a
//! miss, and unmatched detections outside the bucket are dropped. AP is the
//! 101-point interpolated area under the pooled precision/recall staircase;
//! mAP averages AP over IoU thresholds after averaging over categories.

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{AnnotationSet, DetectionSet};
use crate::raster::InstanceMask;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("detections reference unknown image ids {0:?}")]
    UnknownImages(Vec<u64>),
    #[error("{what} {id}: {reason}")]
    BadMask {
        what: &'static str,
        id: u64,
        reason: String,
    },
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("oracle refuses scene: {0}")]
    OracleCap(String),
}

/// Area buckets over ground-truth (or detection) pixel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeBucket {
    All,
    /// area < 32²
    Small,
    /// 32² ≤ area ≤ 96²
    Medium,
    /// area > 96²
    Large,
}

pub const SMALL_LIMIT: u64 = 32 * 32;
pub const LARGE_LIMIT: u64 = 96 * 96;

impl SizeBucket {
    pub const ALL: [SizeBucket; 4] = [SizeBucket::All, SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn contains(self, area: u64) -> bool {
        match self {
            SizeBucket::All => true,
            SizeBucket::Small => area < SMALL_LIMIT,
            SizeBucket::Medium => (SMALL_LIMIT..=LARGE_LIMIT).contains(&area),
            SizeBucket::Large => area > LARGE_LIMIT,
        }
    }

    /// The bucket a single area falls in (never `All`).
    pub fn of(area: u64) -> SizeBucket {
        if area < SMALL_LIMIT {
            SizeBucket::Small
        } else if area <= LARGE_LIMIT {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub class_agnostic: bool,
    pub max_detections_per_image: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            class_agnostic: false,
            max_detections_per_image: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::Config("no IoU thresholds".into()));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(EvalError::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Config("IoU thresholds must be strictly increasing".into()));
        }
        if self.max_detections_per_image == 0 {
            return Err(EvalError::Config("max_detections_per_image must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses `start:step:stop` (inclusive), e.g. `0.5:0.05:0.95`.
    pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>, EvalError> {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Config(format!("thresholds {spec:?}: {e}")))?;
        let out = match parts.as_slice() {
            [single] => vec![*single],
            [start, step, stop] if *step > 0.0 && stop >= start => {
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                // Rounded to 1e-10 so 0.5 + 2 * 0.05 lands on the double nearest 0.6.
                (0..=n)
                    .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
                    .collect()
            }
            _ => return Err(EvalError::Config(format!("thresholds {spec:?}: expected start:step:stop"))),
        };
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou: f64,
    pub ap: Option<f64>,
}

/// One detection's fate at one threshold (class-agnostic key 0 in agnostic mode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub iou_threshold: f64,
    pub image_id: u64,
    pub detection_id: u64,
    pub ground_truth_id: Option<u64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub per_threshold: Vec<ThresholdAp>,
    /// Matching at every threshold over all sizes.
    pub matches: Vec<MatchedPair>,
}

/// Intersection over union of two masks in the same frame. Two empty masks
/// score 0.
pub fn iou(p: &InstanceMask, g: &InstanceMask) -> f64 {
    let inter = p.intersection_area(g).expect("masks share a frame");
    let union = p.area() + g.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive { gt: u64 },
    FalsePositive,
    /// Matched an ignored ground truth, or unmatched outside the bucket.
    Ignored { gt: Option<u64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetOutcome {
    pub id: u64,
    pub score: f64,
    pub outcome: Outcome,
    pub iou: Option<f64>,
}

/// Matching result for one image and one category key at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub image_id: u64,
    pub category: u32,
    /// In matching order: score descending, ties by id.
    pub detections: Vec<DetOutcome>,
    /// Ground truths inside the bucket.
    pub num_gt: usize,
}

pub(crate) struct GtItem {
    pub id: u64,
    pub mask: InstanceMask,
}

pub(crate) struct DtItem {
    pub id: u64,
    pub score: f64,
    pub mask: InstanceMask,
}

/// Detections and ground truths of one (image, category key) with their IoUs.
pub(crate) struct Cell {
    pub image_id: u64,
    pub key: u32,
    pub gts: Vec<GtItem>,
    pub dts: Vec<DtItem>,
    /// `ious[d][g]`
    pub ious: Vec<Vec<f64>>,
}

fn score_order(a: (f64, u64), b: (f64, u64)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl Cell {
    fn new(image_id: u64, key: u32, mut gts: Vec<GtItem>, mut dts: Vec<DtItem>, max_dets: usize) -> Self {
        gts.sort_by_key(|g| g.id);
        dts.sort_by(|a, b| score_order((a.score, a.id), (b.score, b.id)));
        dts.truncate(max_dets);
        let ious = dts
            .iter()
            .map(|d| gts.iter().map(|g| iou(&d.mask, &g.mask)).collect())
            .collect();
        Cell {
            image_id,
            key,
            gts,
            dts,
            ious,
        }
    }

    fn run(&self, tau: f64, bucket: SizeBucket) -> Matching {
        let ignored: Vec<bool> = self.gts.iter().map(|g| !bucket.contains(g.mask.area())).collect();
        let mut taken = vec![false; self.gts.len()];
        let mut detections = Vec::with_capacity(self.dts.len());
        for (d, det) in self.dts.iter().enumerate() {
            // Best unmatched gt, preferring in-bucket ones; ties keep the lowest id.
            let mut best: Option<(bool, f64, usize)> = None;
            for g in 0..self.gts.len() {
                let v = self.ious[d][g];
                if taken[g] || v < tau {
                    continue;
                }
                let cand = (ignored[g], v, g);
                best = match best {
                    None => Some(cand),
                    Some(b) if (!cand.0 && b.0) || (cand.0 == b.0 && cand.1 > b.1) => Some(cand),
                    keep => keep,
                };
            }
            let (outcome, matched_iou) = match best {
                Some((ign, v, g)) => {
                    taken[g] = true;
                    let gt = self.gts[g].id;
                    if ign {
                        (Outcome::Ignored { gt: Some(gt) }, Some(v))
                    } else {
                        (Outcome::TruePositive { gt }, Some(v))
                    }
                }
                None if !bucket.contains(det.mask.area()) => (Outcome::Ignored { gt: None }, None),
                None => (Outcome::FalsePositive, None),
            };
            detections.push(DetOutcome {
                id: det.id,
                score: det.score,
                outcome,
                iou: matched_iou,
            });
        }
        Matching {
            image_id: self.image_id,
            category: self.key,
            detections,
            num_gt: ignored.iter().filter(|&&i| !i).count(),
        }
    }
}

pub(crate) fn build_cells(
    dets: &DetectionSet,
    gts: &AnnotationSet,
    cfg: &EvalConfig,
) -> Result<Vec<Cell>, EvalError> {
    let unknown = dets.unresolved_images(gts);
    if !unknown.is_empty() {
        return Err(EvalError::UnknownImages(unknown));
    }
    let frames: BTreeMap<u64, [u32; 2]> = gts.images.iter().map(|i| (i.id, [i.height, i.width])).collect();
    let key = |c: u32| if cfg.class_agnostic { 0 } else { c };

    type Groups = BTreeMap<(u64, u32), (Vec<GtItem>, Vec<DtItem>)>;
    let mut groups: Groups = BTreeMap::new();
    for a in &gts.annotations {
        let mask = a.segmentation.to_mask().map_err(|e| EvalError::BadMask {
            what: "annotation",
            id: a.id,
            reason: e.to_string(),
        })?;
        if Some(&a.segmentation.size) != frames.get(&a.image_id) {
            return Err(EvalError::BadMask {
                what: "annotation",
                id: a.id,
                reason: "mask frame differs from its image".into(),
            });
        }
        groups
            .entry((a.image_id, key(a.category_id)))
            .or_default()
            .0
            .push(GtItem { id: a.id, mask });
    }
    for d in &dets.0 {
        let mask = d.segmentation.to_mask().map_err(|e| EvalError::BadMask {
            what: "detection",
            id: d.id,
            reason: e.to_string(),
        })?;
        if Some(&d.segmentation.size) != frames.get(&d.image_id) {
            return Err(EvalError::BadMask {
                what: "detection",
                id: d.id,
                reason: "mask frame differs from its image".into(),
            });
        }
        groups.entry((d.image_id, key(d.category_id))).or_default().1.push(DtItem {
            id: d.id,
            score: d.score,
            mask,
        });
    }
    let max_dets = cfg.max_detections_per_image;
    Ok(groups
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|((image_id, key), (g, d))| Cell::new(image_id, key, g, d, max_dets))
        .collect())
}

/// Greedy matching of one image's detections against its ground truths at
/// threshold `tau`, restricted to `bucket`. Returns one [`Matching`] per
/// category key present in either list.
pub fn match_instances(
    dets: &DetectionSet,
    gts: &AnnotationSet,
    image_id: u64,
    tau: f64,
    bucket: SizeBucket,
    cfg: &EvalConfig,
) -> Result<Vec<Matching>, EvalError> {
    let dets = DetectionSet(dets.0.iter().filter(|d| d.image_id == image_id).cloned().collect());
    let mut gts = gts.clone();
    gts.annotations.retain(|a| a.image_id == image_id);
    Ok(build_cells(&dets, &gts, cfg)?
        .iter()
        .map(|c| c.run(tau, bucket))
        .collect())
}

/// 101-point interpolated AP over matchings pooled across images. `None`
/// when there are no in-bucket ground truths.
pub fn average_precision(matchings: &[Matching]) -> Option<f64> {
    let num_gt: usize = matchings.iter().map(|m| m.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, u64, bool)> = matchings
        .iter()
        .flat_map(|m| m.detections.iter())
        .filter_map(|d| match d.outcome {
            Outcome::TruePositive { .. } => Some((d.score, d.id, true)),
            Outcome::FalsePositive => Some((d.score, d.id, false)),
            Outcome::Ignored { .. } => None,
        })
        .collect();
    pooled.sort_by(|a, b| score_order((a.0, a.1), (b.0, b.1)));

    let mut recall = Vec::with_capacity(pooled.len());
    let mut precision = Vec::with_capacity(pooled.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, _, is_tp) in &pooled {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// AP at each threshold for one bucket, averaged over categories that have
/// in-bucket ground truth.
fn bucket_table(cells: &[Cell], thresholds: &[f64], bucket: SizeBucket) -> Vec<Option<f64>> {
    let keys: BTreeSet<u32> = cells.iter().map(|c| c.key).collect();
    thresholds
        .par_iter()
        .map(|&t| {
            let matchings: Vec<Matching> = cells.iter().map(|c| c.run(t, bucket)).collect();
            mean(keys.iter().filter_map(|&k| {
                let per_key: Vec<Matching> = matchings.iter().filter(|m| m.category == k).cloned().collect();
                average_precision(&per_key)
            }))
        })
        .collect()
}

fn threshold_mean(table: &[Option<f64>]) -> Option<f64> {
    // Category validity does not depend on the threshold, so entries are
    // either all present or all absent.
    mean(table.iter().flatten().copied())
}

pub fn evaluate(dets: &DetectionSet, gts: &AnnotationSet, cfg: &EvalConfig) -> Result<EvalResult, EvalError> {
    cfg.validate()?;
    let cells = build_cells(dets, gts, cfg)?;
    let all = bucket_table(&cells, &cfg.iou_thresholds, SizeBucket::All);
    let ap50 = match cfg.iou_thresholds.iter().position(|&t| t == 0.5) {
        Some(i) => all[i],
        None => bucket_table(&cells, &[0.5], SizeBucket::All)[0],
    };
    let bucket_map = |b| threshold_mean(&bucket_table(&cells, &cfg.iou_thresholds, b));

    let mut matches = Vec::new();
    for &t in &cfg.iou_thresholds {
        for c in &cells {
            for d in c.run(t, SizeBucket::All).detections {
                matches.push(MatchedPair {
                    iou_threshold: t,
                    image_id: c.image_id,
                    detection_id: d.id,
                    ground_truth_id: match d.outcome {
                        Outcome::TruePositive { gt } => Some(gt),
                        Outcome::Ignored { gt } => gt,
                        Outcome::FalsePositive => None,
                    },
                    iou: d.iou,
                });
            }
        }
    }
    sort_matches(&mut matches);

    Ok(EvalResult {
        map: threshold_mean(&all),
        ap50,
        ap_s: bucket_map(SizeBucket::Small),
        ap_m: bucket_map(SizeBucket::Medium),
        ap_l: bucket_map(SizeBucket::Large),
        per_threshold: cfg
            .iou_thresholds
            .iter()
            .zip(all)
            .map(|(&iou, ap)| ThresholdAp { iou, ap })
            .collect(),
        matches,
    })
}

pub(crate) fn sort_matches(matches: &mut [MatchedPair]) {
    matches.sort_by(|a, b| {
        a.iou_threshold
            .total_cmp(&b.iou_threshold)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.detection_id.cmp(&b.detection_id))
    });
}

#[cfg(test)]
mod tests;
