//! Brute-force reference scorer for differential testing.
//!
//! Shares no matching or integration code with [`super::evaluate`]: masks are
//! decoded to pixel grids, IoUs come from explicit pixel loops, and
//! interpolated precision is taken as the maximum precision over every
//! ranked prefix that reaches the recall level.

use std::collections::{BTreeMap, BTreeSet};

use super::{EvalConfig, EvalError, EvalResult, MatchedPair, SizeBucket, ThresholdAp};
use crate::dataset_io::{AnnotationSet, DetectionSet};

const CAP: usize = 32;

struct Obj {
    id: u64,
    image: u64,
    key: u32,
    score: f64,
    pixels: Vec<bool>,
    area: u64,
}

fn decode(size: [u32; 2], counts: &[u32]) -> Result<Vec<bool>, String> {
    let n = size[0] as usize * size[1] as usize;
    let mut v = Vec::with_capacity(n);
    let mut bit = false;
    for &c in counts {
        for _ in 0..c {
            v.push(bit);
        }
        bit = !bit;
    }
    if v.len() != n {
        return Err(format!("runs cover {} of {} pixels", v.len(), n));
    }
    Ok(v)
}

fn pixel_iou(a: &Obj, b: &Obj) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn in_bucket(bucket: SizeBucket, area: u64) -> bool {
    match bucket {
        SizeBucket::All => true,
        SizeBucket::Small => area < 1024,
        SizeBucket::Medium => (1024..=9216).contains(&area),
        SizeBucket::Large => area > 9216,
    }
}

/// (score, id, is_tp) of counted detections, plus the in-bucket gt count.
struct Tally {
    ranked: Vec<(f64, u64, bool)>,
    positives: usize,
}

fn interpolated_ap(mut t: Tally) -> Option<f64> {
    if t.positives == 0 {
        return None;
    }
    t.ranked
        .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (i, r) in t.ranked.iter().enumerate() {
        if r.2 {
            tp += 1;
        }
        points.push((tp as f64 / t.positives as f64, tp as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let level = k as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, prec)| *prec)
            .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
        total += best.unwrap_or(0.0);
    }
    Some(total / 101.0)
}

pub fn oracle_evaluate(dets: &DetectionSet, gts: &AnnotationSet, cfg: &EvalConfig) -> Result<EvalResult, EvalError> {
    let images: BTreeMap<u64, [u32; 2]> = gts.images.iter().map(|i| (i.id, [i.height, i.width])).collect();
    let mut missing: Vec<u64> = dets.0.iter().map(|d| d.image_id).filter(|i| !images.contains_key(i)).collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(EvalError::UnknownImages(missing));
    }
    let key_of = |c: u32| if cfg.class_agnostic { 0 } else { c };
    let mut gt_objs = Vec::new();
    for a in &gts.annotations {
        let pixels = decode(a.segmentation.size, &a.segmentation.counts).map_err(|reason| EvalError::BadMask {
            what: "annotation",
            id: a.id,
            reason,
        })?;
        let area = pixels.iter().filter(|&&p| p).count() as u64;
        gt_objs.push(Obj { id: a.id, image: a.image_id, key: key_of(a.category_id), score: 0.0, pixels, area });
    }
    let mut dt_objs = Vec::new();
    for d in &dets.0 {
        let pixels = decode(d.segmentation.size, &d.segmentation.counts).map_err(|reason| EvalError::BadMask {
            what: "detection",
            id: d.id,
            reason,
        })?;
        let area = pixels.iter().filter(|&&p| p).count() as u64;
        dt_objs.push(Obj { id: d.id, image: d.image_id, key: key_of(d.category_id), score: d.score, pixels, area });
    }
    for &img in images.keys() {
        let ng = gt_objs.iter().filter(|o| o.image == img).count();
        let nd = dt_objs.iter().filter(|o| o.image == img).count();
        if ng > CAP || nd > CAP {
            return Err(EvalError::OracleCap(format!(
                "image {img} has {ng} ground truths and {nd} detections (limit {CAP} each)"
            )));
        }
    }

    let keys: BTreeSet<u32> = gt_objs.iter().map(|o| o.key).chain(dt_objs.iter().map(|o| o.key)).collect();
    let mut matches = Vec::new();

    // Returns per-key tallies for one threshold and bucket.
    let mut run = |tau: f64, bucket: SizeBucket, record: bool| -> BTreeMap<u32, Tally> {
        let mut out = BTreeMap::new();
        for &k in &keys {
            let mut tally = Tally { ranked: Vec::new(), positives: 0 };
            for &img in images.keys() {
                let mut g: Vec<&Obj> = gt_objs.iter().filter(|o| o.image == img && o.key == k).collect();
                g.sort_by_key(|o| o.id);
                let mut d: Vec<&Obj> = dt_objs.iter().filter(|o| o.image == img && o.key == k).collect();
                d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
                d.truncate(cfg.max_detections_per_image);
                let ignore: Vec<bool> = g.iter().map(|o| !in_bucket(bucket, o.area)).collect();
                tally.positives += ignore.iter().filter(|i| !**i).count();
                let mut used = vec![false; g.len()];
                for det in &d {
                    let mut pick: Option<usize> = None;
                    let mut pick_iou = 0.0;
                    // First pass: in-bucket gts. Second pass: ignored ones.
                    for want_ignored in [false, true] {
                        for (gi, gt) in g.iter().enumerate() {
                            if used[gi] || ignore[gi] != want_ignored {
                                continue;
                            }
                            let v = pixel_iou(det, gt);
                            if v >= tau && (pick.is_none() || v > pick_iou) {
                                pick = Some(gi);
                                pick_iou = v;
                            }
                        }
                        if pick.is_some() {
                            break;
                        }
                    }
                    match pick {
                        Some(gi) => {
                            used[gi] = true;
                            if !ignore[gi] {
                                tally.ranked.push((det.score, det.id, true));
                            }
                        }
                        None => {
                            if in_bucket(bucket, det.area) {
                                tally.ranked.push((det.score, det.id, false));
                            }
                        }
                    }
                    if record {
                        matches.push(MatchedPair {
                            iou_threshold: tau,
                            image_id: img,
                            detection_id: det.id,
                            ground_truth_id: pick.map(|gi| g[gi].id),
                            iou: pick.map(|_| pick_iou),
                        });
                    }
                }
            }
            out.insert(k, tally);
        }
        out
    };

    let mut table = |tau: f64, bucket: SizeBucket, record: bool| -> Option<f64> {
        let aps: Vec<f64> = run(tau, bucket, record).into_values().filter_map(interpolated_ap).collect();
        if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    };

    let per_threshold: Vec<ThresholdAp> = cfg
        .iou_thresholds
        .iter()
        .map(|&iou| ThresholdAp { iou, ap: table(iou, SizeBucket::All, true) })
        .collect();
    let ap50 = table(0.5, SizeBucket::All, false);
    let mut size_map = |b: SizeBucket| {
        let v: Vec<f64> = cfg.iou_thresholds.iter().filter_map(|&t| table(t, b, false)).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let ap_s = size_map(SizeBucket::Small);
    let ap_m = size_map(SizeBucket::Medium);
    let ap_l = size_map(SizeBucket::Large);
    let present: Vec<f64> = per_threshold.iter().filter_map(|t| t.ap).collect();
    let map = if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    };
    matches.sort_by(|a, b| {
        a.iou_threshold
            .partial_cmp(&b.iou_threshold)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.detection_id.cmp(&b.detection_id))
    });
    Ok(EvalResult { map, ap50, ap_s, ap_m, ap_l, per_threshold, matches })
}
