use super::*;
use crate::dataset_io::{read_manifest, validate};
use crate::raster::Bitmap;

fn solid(w: u32, h: u32, rgb: [u8; 3]) -> Raster {
    Raster::from_fn(w, h, 3, |_, _| rgb).unwrap()
}

fn blob(w: u32, h: u32, taxon_id: u32, rgb: [u8; 3]) -> Individual {
    // An ellipse-ish blob, uniformly coloured across the whole frame so
    // bilinear edge samples keep the colour.
    let bits = Bitmap::from_fn(w, h, |x, y| {
        let dx = (x as f64 + 0.5) / w as f64 - 0.5;
        let dy = (y as f64 + 0.5) / h as f64 - 0.5;
        dx * dx + dy * dy <= 0.25
    });
    Individual {
        image: solid(w, h, rgb),
        mask: InstanceMask::encode(&bits),
        taxon_id,
    }
}

fn tiny_pools() -> SourcePools {
    SourcePools {
        backgrounds: vec![solid(64, 64, [200, 200, 200]), solid(48, 80, [180, 190, 200])],
        individuals: vec![
            blob(6, 4, 200, [200, 30, 30]),
            blob(5, 5, 203, [30, 200, 30]),
            blob(7, 3, 211, [30, 30, 200]),
        ],
    }
}

fn small_cfg(seed: u64) -> PciConfig {
    PciConfig {
        canvas: [64, 64],
        seed,
        ..PciConfig::default()
    }
}

fn scene_pools(canvas: u32) -> SourcePools {
    SourcePools {
        backgrounds: vec![solid(canvas, canvas, [120, 120, 120])],
        individuals: vec![
            blob(40, 24, 200, [250, 10, 10]),
            blob(30, 30, 204, [10, 250, 10]),
            blob(18, 50, 212, [10, 10, 250]),
        ],
    }
}

#[test]
fn recipes_are_reproducible_in_any_order() {
    let pools = tiny_pools();
    let cfg = small_cfg(7);
    let forward: Vec<_> = (0..20).map(|i| sample_recipe(&cfg, &pools, i).unwrap()).collect();
    for i in (0..20).rev() {
        assert_eq!(sample_recipe(&cfg, &pools, i).unwrap(), forward[i as usize]);
    }
    assert_ne!(forward[0], forward[1]);
    assert_ne!(sample_recipe(&small_cfg(8), &pools, 0).unwrap(), forward[0]);
}

// Survival function of chi-square with 4 degrees of freedom.
fn chi2_sf_df4(x: f64) -> f64 {
    (-x / 2.0).exp() * (1.0 + x / 2.0)
}

#[test]
fn placement_counts_are_uniform() {
    let pools = tiny_pools();
    let cfg = small_cfg(11);
    let n = 10_000;
    let mut freq = [0u32; 5];
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let r = sample_recipe(&cfg, &pools, i).unwrap();
        let c = r.placements.len();
        assert!((6..=10).contains(&c));
        freq[c - 6] += 1;
        sigmas.push(r.sigma);
    }
    let expected = n as f64 / 5.0;
    let sd = (n as f64 * 0.2 * 0.8).sqrt();
    for f in freq {
        assert!((f as f64 - expected).abs() <= 5.0 * sd, "{freq:?}");
    }
    let chi2: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
    assert!(chi2_sf_df4(chi2) > 0.001, "chi2 {chi2}");

    assert!(sigmas.iter().all(|s| (0.0..2.0).contains(s)));
    let mean = sigmas.iter().sum::<f64>() / n as f64;
    let se = 2.0 / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}");
}

#[test]
fn chi2_survival_reference_points() {
    assert!((chi2_sf_df4(0.0) - 1.0).abs() < 1e-15);
    // Tabulated critical value for p = 0.001 at 4 degrees of freedom.
    assert!((chi2_sf_df4(18.467) - 0.001).abs() < 1e-5);
}

#[test]
fn offsets_always_touch_the_canvas() {
    let pools = tiny_pools();
    let cfg = PciConfig {
        canvas: [16, 12],
        ..small_cfg(3)
    };
    for i in 0..300 {
        let r = sample_recipe(&cfg, &pools, i).unwrap();
        for p in &r.placements {
            assert!(!placement_footprint(p, &cfg, &pools).unwrap().is_empty());
        }
    }
}

fn one_placement(individual_id: usize, offset: [i64; 2]) -> Placement {
    Placement {
        individual_id,
        flip_h: false,
        flip_v: false,
        angle: 0.0,
        scale: 1.0,
        offset,
    }
}

fn plain_recipe(placements: Vec<Placement>) -> PciRecipe {
    PciRecipe {
        background_id: 0,
        bg_flip_h: false,
        bg_flip_v: false,
        sigma: 0.0,
        placements,
    }
}

#[test]
fn single_unoccluded_individual() {
    let pools = scene_pools(100);
    let cfg = PciConfig {
        canvas: [100, 100],
        ..PciConfig::default()
    };
    let recipe = plain_recipe(vec![Placement {
        angle: 30.0,
        scale: 1.2,
        flip_h: true,
        ..one_placement(0, [20, 25])
    }]);
    let s = synthesize(&recipe, &cfg, &pools).unwrap();
    assert_eq!(s.instances.len(), 1);
    let t = transform_mask(&pools.individuals[0].mask, true, false, 30.0, 1.2).unwrap();
    assert_eq!(s.instances[0].mask, t.reframe(100, 100, 20, 25));
    assert_eq!(s.instances[0].visible_fraction, 1.0);
    assert_eq!(s.instances[0].taxon_id, 200);
}

#[test]
fn total_occlusion_drops_the_lower_instance() {
    let pools = scene_pools(100);
    let cfg = PciConfig {
        canvas: [100, 100],
        ..PciConfig::default()
    };
    let recipe = plain_recipe(vec![one_placement(1, [10, 10]), one_placement(1, [10, 10])]);
    let s = synthesize(&recipe, &cfg, &pools).unwrap();
    assert_eq!(s.instances.len(), 1);
    assert_eq!(s.instances[0].placement, 1);
    assert_eq!(s.instances[0].visible_fraction, 1.0);
}

#[test]
fn truncation_and_partial_occlusion_fractions() {
    let pools = scene_pools(100);
    let cfg = PciConfig {
        canvas: [100, 100],
        ..PciConfig::default()
    };
    // Individual 1 is a 30x30 disc; shifting it half off the left edge
    // leaves exactly the pixels with x >= 15.
    let recipe = plain_recipe(vec![one_placement(1, [-15, 0])]);
    let s = synthesize(&recipe, &cfg, &pools).unwrap();
    let full = pools.individuals[1].mask.area();
    let kept = Bitmap::from_fn(30, 30, |x, y| x >= 15 && pools.individuals[1].mask.contains(x, y)).count();
    assert_eq!(s.instances[0].mask.area(), kept);
    assert_eq!(s.instances[0].visible_fraction, kept as f64 / full as f64);

    let strict = PciConfig {
        min_visible_fraction: 0.6,
        ..cfg
    };
    assert!(synthesize(&recipe, &strict, &pools).unwrap().instances.is_empty());
}

fn random_scenes() -> impl Iterator<Item = (PciConfig, PciRecipe, Synthesis)> {
    let pools = scene_pools(128);
    (0..40).map(move |i| {
        let cfg = PciConfig {
            canvas: [128, 128],
            seed: 99,
            ..PciConfig::default()
        };
        let r = sample_recipe(&cfg, &pools, i).unwrap();
        let s = synthesize(&r, &cfg, &pools).unwrap();
        (cfg, r, s)
    })
}

#[test]
fn changed_pixels_are_exactly_the_labels() {
    let pools = scene_pools(128);
    for (cfg, recipe, s) in random_scenes() {
        let bg = processed_background(&recipe, &cfg, &pools).unwrap();
        let mut labels = InstanceMask::empty(128, 128);
        for inst in &s.instances {
            labels = labels.union(&inst.mask).unwrap();
        }
        let changed = InstanceMask::encode(&Bitmap::from_fn(128, 128, |x, y| s.image.pixel(x, y) != bg.pixel(x, y)));
        assert_eq!(changed, labels);
    }
}

#[test]
fn labels_are_sound() {
    let pools = scene_pools(128);
    for (cfg, recipe, s) in random_scenes() {
        let n = recipe.placements.len();
        assert!(s.instances.len() <= n && n <= 10);
        for (k, a) in s.instances.iter().enumerate() {
            assert!(a.visible_fraction > 0.0 && a.visible_fraction <= 1.0);
            let footprint = placement_footprint(&recipe.placements[a.placement], &cfg, &pools).unwrap();
            assert!(a.mask.difference(&footprint).unwrap().is_empty());
            for b in &s.instances[k + 1..] {
                assert_eq!(a.mask.intersection_area(&b.mask).unwrap(), 0);
            }
        }
        assert_eq!(synthesize(&recipe, &cfg, &pools).unwrap(), s);
    }
}

#[test]
fn degenerate_transforms_are_redrawn_then_fail() {
    // Only a corner pixel is set, so a 1x1 output (which samples the center)
    // is always empty.
    let corner = Individual {
        image: solid(3, 3, [0, 0, 0]),
        mask: InstanceMask::encode(&Bitmap::from_fn(3, 3, |x, y| x == 0 && y == 0)),
        taxon_id: 200,
    };
    let pools = SourcePools {
        backgrounds: vec![solid(8, 8, [255, 255, 255])],
        individuals: vec![corner],
    };
    let cfg = PciConfig {
        canvas: [8, 8],
        scale_range: [0.01, 0.01],
        ..PciConfig::default()
    };
    match sample_recipe(&cfg, &pools, 0) {
        Err(PciError::Degenerate { attempts, placement, .. }) => {
            assert_eq!(attempts, MAX_TRANSFORM_ATTEMPTS);
            assert_eq!(placement, 0);
        }
        other => panic!("expected degenerate error, got {other:?}"),
    }
}

#[test]
fn config_validation() {
    assert!(PciConfig::default().validate().is_ok());
    let bad = [
        PciConfig { count_range: [0, 4], ..PciConfig::default() },
        PciConfig { count_range: [5, 4], ..PciConfig::default() },
        PciConfig { sigma_range: [-1.0, 2.0], ..PciConfig::default() },
        PciConfig { scale_range: [0.0, 1.0], ..PciConfig::default() },
        PciConfig { min_visible_fraction: 1.5, ..PciConfig::default() },
        PciConfig { canvas: [0, 10], ..PciConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(PciError::Config(_))), "{c:?}");
    }
    let empty = SourcePools::default();
    assert!(matches!(sample_recipe(&PciConfig::default(), &empty, 0), Err(PciError::Config(_))));
}

#[test]
fn config_json_defaults_and_unknown_fields() {
    let c: PciConfig = serde_json::from_str(r#"{"seed": 5, "canvas": [320, 200]}"#).unwrap();
    assert_eq!(c.count_range, [6, 10]);
    assert_eq!(c.canvas, [320, 200]);
    assert!(serde_json::from_str::<PciConfig>(r#"{"sede": 5}"#).is_err());
}

#[test]
fn empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let aset = generate_dataset(&small_cfg(1), &tiny_pools(), &TaxonomyTable::builtin(), 0, dir.path()).unwrap();
    assert!(aset.images.is_empty() && aset.annotations.is_empty());
    let ids: Vec<u32> = aset.categories.iter().map(|c| c.id).collect();
    assert_eq!(ids, vec![100, 103, 111]);
    assert_eq!(read_manifest(dir.path().join("annotations.json")).unwrap(), aset);
}

#[test]
fn dataset_is_byte_deterministic_across_pool_sizes() {
    let cfg = PciConfig {
        canvas: [96, 80],
        seed: 2024,
        ..PciConfig::default()
    };
    let pools = tiny_pools();
    let tax = TaxonomyTable::builtin();
    let mut manifests = Vec::new();
    for threads in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let aset = pool.install(|| generate_dataset(&cfg, &pools, &tax, 12, dir.path())).unwrap();
        assert!(validate(&aset).is_empty());
        assert_eq!(aset.images.len(), 12);
        assert!(dir.path().join("images/000012.png").exists());
        let img = Raster::read_png(dir.path().join("images/000003.png")).unwrap();
        assert_eq!((img.width(), img.height()), (96, 80));
        manifests.push(std::fs::read(dir.path().join("annotations.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn order_rank_labels() {
    let cfg = PciConfig {
        label_rank: LabelRank::Order,
        ..small_cfg(5)
    };
    let dir = tempfile::tempdir().unwrap();
    let aset = generate_dataset(&cfg, &tiny_pools(), &TaxonomyTable::builtin(), 3, dir.path()).unwrap();
    let ids: Vec<u32> = aset.categories.iter().map(|c| c.id).collect();
    assert_eq!(ids, vec![10, 15]);
    assert!(aset.annotations.iter().all(|a| ids.contains(&a.category_id)));
}
