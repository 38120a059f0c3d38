use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::oracle_evaluate;
use super::*;
use crate::dataset_io::{Annotation, Category, Detection, ImageRecord};
use crate::raster::Bitmap;
use crate::taxonomy::Rank;

fn rect(w: u32, h: u32, x0: u32, y0: u32, rw: u32, rh: u32) -> InstanceMask {
    InstanceMask::encode(&Bitmap::from_fn(w, h, |x, y| {
        x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh
    }))
}

fn scene(frame: (u32, u32), gts: &[(u64, u32, InstanceMask)]) -> AnnotationSet {
    scene_n(frame, 1, gts)
}

fn scene_n(frame: (u32, u32), n_images: u64, gts: &[(u64, u32, InstanceMask)]) -> AnnotationSet {
    let mut aset = AnnotationSet::default();
    let mut images: Vec<u64> = gts.iter().map(|g| g.0).collect();
    images.extend(1..=n_images);
    images.sort_unstable();
    images.dedup();
    for id in images {
        aset.images.push(ImageRecord {
            id,
            file_name: format!("{id}.png"),
            width: frame.0,
            height: frame.1,
            placements: None,
            recipe_digest: None,
        });
    }
    let cats: BTreeSet<u32> = gts.iter().map(|g| g.1).chain([1]).collect();
    aset.categories = cats
        .into_iter()
        .map(|id| Category { id, name: format!("c{id}"), rank: Rank::Family, parent_id: None })
        .collect();
    for (i, (img, cat, m)) in gts.iter().enumerate() {
        aset.annotations.push(Annotation::from_mask(i as u64 + 1, *img, *cat, m));
    }
    aset
}

fn det(id: u64, img: u64, cat: u32, m: &InstanceMask, score: f64) -> Detection {
    Detection::from_mask(id, img, cat, m, score)
}

#[test]
fn iou_examples() {
    let a = rect(8, 8, 0, 0, 4, 4);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &rect(8, 8, 4, 4, 4, 4)), 0.0);
    // 2x2 blocks sharing one 1x2 column
    let p = rect(4, 4, 0, 0, 2, 2);
    let g = rect(4, 4, 1, 0, 2, 2);
    assert!((iou(&p, &g) - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(iou(&InstanceMask::empty(3, 3), &InstanceMask::empty(3, 3)), 0.0);
}

#[test]
fn matching_examples() {
    let cfg = EvalConfig::default();
    let g = rect(20, 20, 0, 0, 10, 10);
    let gts = scene((20, 20), &[(1, 1, g.clone())]);

    let dets = DetectionSet(vec![det(1, 1, 1, &g, 0.9)]);
    let m = match_instances(&dets, &gts, 1, 0.5, SizeBucket::All, &cfg).unwrap();
    assert_eq!(m[0].detections[0].outcome, Outcome::TruePositive { gt: 1 });

    // IoU 0.9 (90 px inside gt) scored 0.7; IoU 0.8 scored 0.95 -> the 0.95 one wins.
    let d09 = rect(20, 20, 0, 0, 10, 9);
    let d08 = rect(20, 20, 0, 0, 10, 8);
    let dets = DetectionSet(vec![det(1, 1, 1, &d09, 0.7), det(2, 1, 1, &d08, 0.95)]);
    let m = match_instances(&dets, &gts, 1, 0.5, SizeBucket::All, &cfg).unwrap();
    let out: Vec<_> = m[0].detections.iter().map(|d| (d.id, d.outcome)).collect();
    assert_eq!(out, vec![(2, Outcome::TruePositive { gt: 1 }), (1, Outcome::FalsePositive)]);

    // IoU 0.49 at tau 0.50 -> FP
    let g100 = rect(20, 20, 0, 0, 10, 10);
    let d49 = rect(20, 20, 0, 0, 7, 7);
    assert!((iou(&d49, &g100) - 0.49).abs() < 1e-15);
    let dets = DetectionSet(vec![det(1, 1, 1, &d49, 0.5)]);
    let m = match_instances(&dets, &gts, 1, 0.5, SizeBucket::All, &cfg).unwrap();
    assert_eq!(m[0].detections[0].outcome, Outcome::FalsePositive);
}

fn matching(dets: Vec<(u64, f64, Outcome)>, num_gt: usize) -> Matching {
    Matching {
        image_id: 1,
        category: 1,
        detections: dets
            .into_iter()
            .map(|(id, score, outcome)| DetOutcome { id, score, outcome, iou: None })
            .collect(),
        num_gt,
    }
}

#[test]
fn average_precision_examples() {
    let tp = |g| Outcome::TruePositive { gt: g };
    assert_eq!(average_precision(&[matching(vec![(1, 1.0, tp(1)), (2, 1.0, tp(2))], 2)]), Some(1.0));
    assert_eq!(average_precision(&[matching(vec![], 3)]), Some(0.0));
    assert_eq!(average_precision(&[matching(vec![(1, 0.9, tp(1)), (2, 0.8, Outcome::FalsePositive)], 1)]), Some(1.0));
    assert_eq!(average_precision(&[matching(vec![(1, 0.9, Outcome::FalsePositive)], 0)]), None);
    // FP first, then TP: precision 0.5 at every recall level.
    let ap = average_precision(&[matching(vec![(1, 0.9, Outcome::FalsePositive), (2, 0.8, tp(1))], 1)]).unwrap();
    assert!((ap - 0.5).abs() < 1e-15);
    // One of two gts found: recall levels 0..=0.5 get precision 1 -> 51/101.
    let ap = average_precision(&[matching(vec![(1, 0.9, tp(1))], 2)]).unwrap();
    assert!((ap - 51.0 / 101.0).abs() < 1e-15);
}

#[test]
fn perfect_predictions_score_one() {
    let gts = scene(
        (64, 64),
        &[(1, 1, rect(64, 64, 0, 0, 40, 40)), (1, 2, rect(64, 64, 45, 45, 10, 10)), (2, 1, rect(64, 64, 3, 3, 5, 5))],
    );
    let dets = DetectionSet::from_ground_truth(&gts);
    let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
    assert_eq!(r.map, Some(1.0));
    assert_eq!(r.ap50, Some(1.0));
    assert_eq!(r.ap_s, Some(1.0));
    assert_eq!(r.ap_m, Some(1.0));
    assert_eq!(r.ap_l, None);
}

#[test]
fn iou_point_six_gives_point_three() {
    let gts = scene((64, 64), &[(1, 1, rect(64, 64, 0, 0, 10, 10))]);
    let d = rect(64, 64, 0, 0, 10, 6);
    assert_eq!(iou(&d, &gts.annotations[0].segmentation.to_mask().unwrap()), 0.6);
    let dets = DetectionSet(vec![det(1, 1, 1, &d, 0.8)]);
    let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
    let table: Vec<f64> = r.per_threshold.iter().map(|t| t.ap.unwrap()).collect();
    assert_eq!(table, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((r.map.unwrap() - 0.3).abs() < 1e-12);
    let o = oracle_evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
    assert!((o.map.unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn size_buckets_by_area() {
    assert_eq!(SizeBucket::of(900), SizeBucket::Small);
    assert_eq!(SizeBucket::of(1023), SizeBucket::Small);
    assert_eq!(SizeBucket::of(1024), SizeBucket::Medium);
    assert_eq!(SizeBucket::of(2500), SizeBucket::Medium);
    assert_eq!(SizeBucket::of(9216), SizeBucket::Medium);
    assert_eq!(SizeBucket::of(9217), SizeBucket::Large);
    assert_eq!(SizeBucket::of(10_000), SizeBucket::Large);

    let small = rect(300, 300, 0, 0, 30, 30);
    let medium = rect(300, 300, 50, 0, 50, 50);
    let large = rect(300, 300, 150, 150, 100, 100);
    let gts = scene((300, 300), &[(1, 1, small), (1, 1, medium.clone()), (1, 1, large)]);
    let dets = DetectionSet(vec![det(1, 1, 1, &medium, 1.0)]);
    let r = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
    assert_eq!(r.ap_m, Some(1.0));
    assert_eq!(r.ap_s, Some(0.0));
    assert_eq!(r.ap_l, Some(0.0));
    let o = oracle_evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
    assert_eq!((o.ap_s, o.ap_m, o.ap_l), (r.ap_s, r.ap_m, r.ap_l));
}

#[test]
fn unknown_image_listed() {
    let gts = scene((8, 8), &[(1, 1, rect(8, 8, 0, 0, 2, 2))]);
    let dets = DetectionSet(vec![det(1, 7, 1, &rect(8, 8, 0, 0, 2, 2), 0.5), det(2, 3, 1, &rect(8, 8, 0, 0, 2, 2), 0.5)]);
    match evaluate(&dets, &gts, &EvalConfig::default()) {
        Err(EvalError::UnknownImages(ids)) => assert_eq!(ids, vec![3, 7]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn threshold_parsing() {
    let t = EvalConfig::parse_thresholds("0.5:0.05:0.95").unwrap();
    assert_eq!(t, EvalConfig::default().iou_thresholds);
    assert_eq!(EvalConfig::parse_thresholds("0.75").unwrap(), vec![0.75]);
    assert!(EvalConfig::parse_thresholds("0.5:0:0.9").is_err());
    let bad = EvalConfig { iou_thresholds: vec![0.6, 0.5], ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn oracle_refuses_crowded_scenes() {
    let gts: Vec<_> = (0..33).map(|i| (1u64, 1u32, rect(64, 64, i % 64, 0, 1, 1))).collect();
    let aset = scene((64, 64), &gts);
    assert!(matches!(
        oracle_evaluate(&DetectionSet::default(), &aset, &EvalConfig::default()),
        Err(EvalError::OracleCap(_))
    ));
}

/// Random small scene: blobs of random rectangles, detections perturbed from
/// ground truth plus spurious ones, with deliberate score ties.
pub(crate) fn random_scene(seed: u64) -> (AnnotationSet, DetectionSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = rng.gen_range(1..=5u64);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let mut next_det = 1;
    let mk = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.gen_range(1..48u32), rng.gen_range(1..48u32));
        let (x, y) = (rng.gen_range(0..64 - w.min(63)), rng.gen_range(0..64 - h.min(63)));
        (x, y, w, h)
    };
    for img in 1..=n_images {
        for _ in 0..rng.gen_range(0..=8) {
            let (x, y, w, h) = mk(&mut rng);
            let cat = rng.gen_range(1..=3u32);
            let m = rect(64, 64, x, y, w, h);
            gts.push((img, cat, m));
            if rng.gen_bool(0.8) {
                let dx = rng.gen_range(0..3u32);
                let dy = rng.gen_range(0..3u32);
                let dm = rect(64, 64, (x + dx).min(63), (y + dy).min(63), w.max(2) - 1, h.max(2) - 1);
                let dcat = if rng.gen_bool(0.85) { cat } else { rng.gen_range(1..=3) };
                let score = (rng.gen_range(0..20) as f64) / 20.0;
                dets.push(det(next_det, img, dcat, &dm, score));
                next_det += 1;
            }
        }
        for _ in 0..rng.gen_range(0..=3) {
            let (x, y, w, h) = mk(&mut rng);
            let score = (rng.gen_range(0..20) as f64) / 20.0;
            dets.push(det(next_det, img, rng.gen_range(1..=3), &rect(64, 64, x, y, w, h), score));
            next_det += 1;
        }
    }
    (scene_n((64, 64), n_images, &gts), DetectionSet(dets))
}

fn assert_close(a: &EvalResult, b: &EvalResult) {
    let f = |x: Option<f64>, y: Option<f64>, what: &str| match (x, y) {
        (None, None) => {}
        (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9, "{what}: {x} vs {y}"),
        _ => panic!("{what}: {x:?} vs {y:?}"),
    };
    f(a.map, b.map, "map");
    f(a.ap50, b.ap50, "ap50");
    f(a.ap_s, b.ap_s, "ap_s");
    f(a.ap_m, b.ap_m, "ap_m");
    f(a.ap_l, b.ap_l, "ap_l");
    assert_eq!(a.per_threshold.len(), b.per_threshold.len());
    for (x, y) in a.per_threshold.iter().zip(&b.per_threshold) {
        f(x.ap, y.ap, "per_threshold");
    }
    assert_eq!(a.matches.len(), b.matches.len());
    for (x, y) in a.matches.iter().zip(&b.matches) {
        assert_eq!((x.image_id, x.detection_id, x.ground_truth_id), (y.image_id, y.detection_id, y.ground_truth_id));
        f(x.iou, y.iou, "match iou");
    }
}

#[test]
fn oracle_agrees_on_random_scenes() {
    for seed in 0..120 {
        let (gts, dets) = random_scene(seed);
        for agnostic in [false, true] {
            let cfg = EvalConfig { class_agnostic: agnostic, ..Default::default() };
            let a = evaluate(&dets, &gts, &cfg).unwrap();
            let b = oracle_evaluate(&dets, &gts, &cfg).unwrap();
            assert_close(&a, &b);
        }
    }
}

#[test]
fn agnostic_equals_aware_with_single_category() {
    for seed in 0..40 {
        let (mut gts, mut dets) = random_scene(1000 + seed);
        gts.annotations.iter_mut().for_each(|a| a.category_id = 1);
        dets.0.iter_mut().for_each(|d| d.category_id = 1);
        let aware = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        let agn = evaluate(&dets, &gts, &EvalConfig { class_agnostic: true, ..Default::default() }).unwrap();
        assert_eq!(aware, agn);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn iou_symmetric_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(1..30u32), rng.gen_range(1..30u32));
        let a = InstanceMask::encode(&Bitmap::from_fn(w, h, |_, _| rng.gen_bool(0.5)));
        let b = InstanceMask::encode(&Bitmap::from_fn(w, h, |_, _| rng.gen_bool(0.5)));
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
    }

    #[test]
    fn permutation_invariant(seed in 0u64..10_000) {
        let (gts, dets) = random_scene(seed);
        let base = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        let mut shuffled = dets.clone();
        use rand::seq::SliceRandom;
        shuffled.0.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        prop_assert_eq!(evaluate(&shuffled, &gts, &EvalConfig::default()).unwrap(), base);
    }

    #[test]
    fn monotone_score_transform_invariant(seed in 0u64..10_000) {
        let (gts, dets) = random_scene(seed);
        let base = evaluate(&dets, &gts, &EvalConfig::default()).unwrap();
        let mut moved = dets.clone();
        moved.0.iter_mut().for_each(|d| d.score = (d.score * d.score + 0.1) / 1.1);
        prop_assert_eq!(evaluate(&moved, &gts, &EvalConfig::default()).unwrap(), base);
    }

    #[test]
    fn lower_scored_duplicate_never_helps(seed in 0u64..10_000) {
        let (gts, dets) = random_scene(seed);
        let cfg = EvalConfig::default();
        let base = evaluate(&dets, &gts, &cfg).unwrap();
        // duplicate the lowest-id true positive at the minimum score
        let tp = base.matches.iter().find(|m| m.iou_threshold == 0.5 && m.ground_truth_id.is_some());
        if let Some(tp) = tp {
            let src = dets.0.iter().find(|d| d.id == tp.detection_id).unwrap().clone();
            let mut more = dets.clone();
            let mut dup = src.clone();
            dup.id = 10_000;
            dup.score = 0.0;
            more.0.push(dup);
            let r = evaluate(&more, &gts, &cfg).unwrap();
            prop_assert!(r.map.unwrap_or(0.0) <= base.map.unwrap_or(0.0) + 1e-12);
        }
    }
}
