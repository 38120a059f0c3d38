use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use planksynth_core::dataset_io::{self, AnnotationSet, DetectionSet};
use planksynth_core::encgeom::{self, EncoderSpec};
use planksynth_core::evaluator::{self, EvalConfig, EvalResult};
use planksynth_core::pcigen::{self, SourcePools};
use planksynth_core::raster::Raster;
use planksynth_core::render::{self, OverlayStyle};
use planksynth_core::taxonomy::TaxonomyTable;
use planksynth_core::tiler::{self, MergeConfig, TileOrigin};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{base_dir, read_json, write_json, GenerateConfig, PoolSource, TileEntry, TileManifest};
use crate::{Classify, EncgeomArgs, EvaluateArgs, Failure, GenerateArgs, MergeArgs, RenderArgs, StatsArgs, TileArgs};

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("starting worker threads")
        .data()
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .data()
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let (mut cfg, base) = match &a.config {
        Some(path) => (read_json::<GenerateConfig>(path).usage()?, base_dir(path)),
        None => (GenerateConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = a.seed {
        cfg.pci.seed = seed;
    }
    let count = a
        .count
        .or(cfg.count)
        .ok_or_else(|| anyhow!("no image count: pass --count or set `count` in the config"))
        .usage()?;
    cfg.pci.validate().usage()?;
    let taxonomy = match &cfg.taxonomy {
        Some(p) => TaxonomyTable::load(resolve(&base, p)).usage()?,
        None => TaxonomyTable::builtin(),
    };
    let pools = match &cfg.pools {
        PoolSource::Synthetic(spec) => {
            spec.validate().usage()?;
            SourcePools::synthetic(spec)
        }
        PoolSource::Files { backgrounds, individuals } => {
            SourcePools::load(&resolve(&base, backgrounds), &resolve(&base, individuals)).data()?
        }
    };
    pools.validate(Some(&taxonomy)).usage()?;
    create_dir(&a.out)?;

    let started = Instant::now();
    let pool = thread_pool(a.jobs)?;
    let aset = pool
        .install(|| pcigen::generate_dataset(&cfg.pci, &pools, &taxonomy, count, &a.out))
        .data()?;
    let seconds = started.elapsed().as_secs_f64();
    if a.json {
        print_json(&json!({
            "images": aset.images.len(),
            "instances": aset.annotations.len(),
            "categories": aset.categories.len(),
            "seed": cfg.pci.seed,
            "config_digest": cfg.pci.digest(),
            "seconds": seconds,
        }));
    } else {
        println!(
            "wrote {} images, {} instances, {} categories to {} in {:.1} s",
            aset.images.len(),
            aset.annotations.len(),
            aset.categories.len(),
            a.out.display(),
            seconds
        );
    }
    Ok(())
}

fn tile_name(o: TileOrigin) -> String {
    format!("tile_{:05}_{:05}", o.x, o.y)
}

pub(crate) fn tile(a: TileArgs) -> Result<(), Failure> {
    let img = Raster::read_png(&a.image).data()?;
    let plan = tiler::plan_tiles(img.width(), img.height(), a.tile, a.overlap).usage()?;
    let gt = match (&a.gt, a.image_id) {
        (Some(path), Some(id)) => {
            let aset = dataset_io::read_manifest(path).data()?;
            let rec = aset
                .image(id)
                .ok_or_else(|| anyhow!("image {id} is not in {}", path.display()))
                .data()?;
            if (rec.width, rec.height) != (img.width(), img.height()) {
                return Err(anyhow!(
                    "image {id} is {}x{} in the manifest but {}x{} on disk",
                    rec.width,
                    rec.height,
                    img.width(),
                    img.height()
                ))
                .data();
            }
            let mut dets = DetectionSet::from_ground_truth(&aset);
            dets.0.retain(|d| d.image_id == id);
            Some(dets)
        }
        _ => None,
    };
    create_dir(&a.out)?;

    let pool = thread_pool(a.jobs)?;
    let tiles = pool.install(|| {
        plan.tiles
            .par_iter()
            .map(|&o| -> anyhow::Result<TileEntry> {
                let name = tile_name(o);
                let image = format!("{name}.png");
                tiler::crop_tile(&img, o, plan.tile_width, plan.tile_height).write_png(a.out.join(&image))?;
                let detections = match &gt {
                    Some(dets) => {
                        let file = format!("{name}.detections.json");
                        let cropped = tiler::crop_detections(dets, o, plan.tile_width, plan.tile_height);
                        dataset_io::write_detections(&cropped, a.out.join(&file))?;
                        Some(file)
                    }
                    None => None,
                };
                Ok(TileEntry {
                    x: o.x,
                    y: o.y,
                    image,
                    detections,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()
    });
    let manifest = TileManifest {
        source: a.image.display().to_string(),
        image_id: a.image_id,
        plan,
        tiles: tiles.data()?,
    };
    write_json(&manifest, &a.out.join("tiles.json")).data()?;
    if a.json {
        print_json(&json!({
            "tiles": manifest.tiles.len(),
            "columns": manifest.plan.x_origins().len(),
            "rows": manifest.plan.y_origins().len(),
            "tile_width": manifest.plan.tile_width,
            "tile_height": manifest.plan.tile_height,
        }));
    } else {
        println!(
            "{} tiles ({} x {}) of {}x{} written to {}",
            manifest.tiles.len(),
            manifest.plan.x_origins().len(),
            manifest.plan.y_origins().len(),
            manifest.plan.tile_width,
            manifest.plan.tile_height,
            a.out.display()
        );
    }
    Ok(())
}

fn parse_containment(s: &str) -> anyhow::Result<Option<f64>> {
    match s.trim() {
        "off" | "none" => Ok(None),
        v => Ok(Some(v.parse().with_context(|| format!("containment {v:?}"))?)),
    }
}

pub(crate) fn merge(a: MergeArgs) -> Result<(), Failure> {
    let cfg = MergeConfig {
        iou_merge_threshold: a.iou_merge,
        containment_threshold: parse_containment(&a.containment).usage()?,
    };
    cfg.validate().usage()?;
    let manifest: TileManifest = read_json(&a.tiles).data()?;
    let image_id = a
        .image_id
        .or(manifest.image_id)
        .ok_or_else(|| anyhow!("no image id: pass --image-id or tile with one"))
        .usage()?;
    let base = base_dir(&a.tiles);
    let (w, h) = (manifest.plan.image_width, manifest.plan.image_height);

    let mut lifted = Vec::new();
    for t in &manifest.tiles {
        let Some(file) = &t.detections else {
            continue;
        };
        let dets = dataset_io::read_detections(base.join(file)).data()?;
        let o = TileOrigin { x: t.x, y: t.y };
        lifted.extend(tiler::lift_detections(&dets, o, w, h).0);
    }
    let n_in = lifted.len();
    for (i, d) in lifted.iter_mut().enumerate() {
        d.id = i as u64 + 1;
        d.image_id = image_id;
    }
    let merged = tiler::merge_detections(&DetectionSet(lifted), &cfg);
    dataset_io::write_detections(&merged, &a.out).data()?;
    if a.json {
        print_json(&json!({ "lifted": n_in, "merged": merged.0.len() }));
    } else {
        println!("merged {} tile detections into {}", n_in, merged.0.len());
    }
    Ok(())
}

fn parse_threshold_list(spec: &str) -> anyhow::Result<Vec<f64>> {
    if spec.contains(',') {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().with_context(|| format!("threshold {p:?}")))
            .collect()
    } else {
        Ok(EvalConfig::parse_thresholds(spec)?)
    }
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub(crate) fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(path) => read_json::<EvalConfig>(path).usage()?,
        None => EvalConfig::default(),
    };
    if let Some(spec) = &a.thresholds {
        cfg.iou_thresholds = parse_threshold_list(spec).usage()?;
    }
    if a.class_agnostic {
        cfg.class_agnostic = true;
    }
    if let Some(n) = a.max_dets {
        cfg.max_detections_per_image = n;
    }
    cfg.validate().usage()?;
    let gt = dataset_io::read_manifest(&a.gt).data()?;
    let dt = dataset_io::read_detections(&a.dt).data()?;
    let result: EvalResult = evaluator::evaluate(&dt, &gt, &cfg).data()?;
    if let Some(out) = &a.out {
        write_json(&result, out).data()?;
    }
    if a.json {
        print_json(&json!({
            "map": result.map,
            "ap50": result.ap50,
            "ap_s": result.ap_s,
            "ap_m": result.ap_m,
            "ap_l": result.ap_l,
            "per_threshold": result.per_threshold,
        }));
    } else {
        println!("mAP {}", fmt_ap(result.map));
        println!("AP50 {}", fmt_ap(result.ap50));
        println!("APs {}", fmt_ap(result.ap_s));
        println!("APm {}", fmt_ap(result.ap_m));
        println!("APl {}", fmt_ap(result.ap_l));
        for t in &result.per_threshold {
            println!("AP@{:.2} {}", t.iou, fmt_ap(t.ap));
        }
    }
    Ok(())
}

fn infer_image_id(aset: &AnnotationSet, image: &Path) -> anyhow::Result<u64> {
    let name = image.file_name().ok_or_else(|| anyhow!("{} has no file name", image.display()))?;
    let hits: Vec<u64> = aset
        .images
        .iter()
        .filter(|r| Path::new(&r.file_name).file_name() == Some(name))
        .map(|r| r.id)
        .collect();
    match hits.as_slice() {
        [id] => Ok(*id),
        [] => bail!("no manifest image named {:?}; pass --image-id", name),
        _ => bail!("several manifest images named {:?}; pass --image-id", name),
    }
}

pub(crate) fn render(a: RenderArgs) -> Result<(), Failure> {
    let mut style = match &a.style {
        Some(path) => read_json::<OverlayStyle>(path).usage()?,
        None => OverlayStyle::default(),
    };
    if let Some(alpha) = a.alpha {
        style.alpha = alpha;
    }
    style.draw_contours &= !a.no_contours;
    style.draw_labels &= !a.no_labels;
    style.validate().usage()?;

    let img = Raster::read_png(&a.image).data()?;
    let aset = dataset_io::read_manifest(&a.gt).data()?;
    let image_id = match a.image_id {
        Some(id) => id,
        None => infer_image_id(&aset, &a.image).usage()?,
    };
    let items = match &a.dt {
        Some(path) => {
            let dets = dataset_io::read_detections(path).data()?;
            render::items_from_detections(&dets, image_id).data()?
        }
        None => render::items_from_annotations(&aset, image_id).data()?,
    };
    let out = render::render_overlay(&img, &items, &style).data()?;
    out.write_png(&a.out).data()?;
    println!("drew {} instances on image {} into {}", items.len(), image_id, a.out.display());
    Ok(())
}

pub(crate) fn encgeom(a: EncgeomArgs) -> Result<(), Failure> {
    let spec = match &a.config {
        Some(path) => read_json::<EncoderSpec>(path).usage()?,
        None => EncoderSpec::default(),
    };
    spec.validate().usage()?;
    if !(0.0..1.0).contains(&a.mask_ratio) {
        return Err(anyhow!("mask ratio {} outside [0, 1)", a.mask_ratio)).usage();
    }
    if !a.check {
        let sides: Vec<String> = encgeom::PYRAMID_STRIDES
            .iter()
            .map(|&s| format!("stride {s}: {0}x{0}", spec.level_side(s)))
            .collect();
        println!(
            "{} tokens on a {1}x{1} grid; {2}; MAE masks {3}",
            spec.grid_side() * spec.grid_side(),
            spec.grid_side(),
            sides.join(", "),
            encgeom::masked_count((spec.grid_side() * spec.grid_side()) as usize, a.mask_ratio)
        );
        return Ok(());
    }
    let report = encgeom::self_check(&spec, a.mask_ratio);
    if a.json {
        print_json(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        print!("{report}");
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(anyhow!("{failed} geometry checks failed")).data()
    }
}

pub(crate) fn stats(a: StatsArgs) -> Result<(), Failure> {
    let aset = dataset_io::read_manifest(&a.manifest).data()?;
    let per_image = aset.by_image();
    let mut labels_hist: BTreeMap<usize, u64> = BTreeMap::new();
    let max_labels = per_image.values().map(Vec::len).max().unwrap_or(0);
    for k in 0..=max_labels {
        labels_hist.insert(k, 0);
    }
    for anns in per_image.values() {
        *labels_hist.entry(anns.len()).or_default() += 1;
    }
    let mut per_category: BTreeMap<u32, u64> = aset.categories.iter().map(|c| (c.id, 0)).collect();
    for ann in &aset.annotations {
        *per_category.entry(ann.category_id).or_default() += 1;
    }
    let mut placements_hist: BTreeMap<u32, u64> = BTreeMap::new();
    for rec in &aset.images {
        if let Some(p) = rec.placements {
            *placements_hist.entry(p).or_default() += 1;
        }
    }
    let name_of = |id: u32| {
        aset.categories
            .iter()
            .find(|c| c.id == id)
            .map_or("?", |c| c.name.as_str())
    };
    let n_img = aset.images.len();
    let n_ann = aset.annotations.len();
    if a.json {
        let cats: Vec<_> = per_category
            .iter()
            .map(|(id, n)| json!({ "id": id, "name": name_of(*id), "instances": n }))
            .collect();
        print_json(&json!({
            "images": n_img,
            "instances": n_ann,
            "mean_instances_per_image": if n_img == 0 { 0.0 } else { n_ann as f64 / n_img as f64 },
            "categories": cats,
            "labels_per_image": labels_hist,
            "placements_per_image": placements_hist,
        }));
        return Ok(());
    }
    println!("images {n_img}");
    println!("instances {n_ann}");
    if n_img > 0 {
        println!("mean instances per image {:.3}", n_ann as f64 / n_img as f64);
    }
    println!("instances per category:");
    for (id, n) in &per_category {
        println!("  {id:>6} {:<20} {n}", name_of(*id));
    }
    println!("labels per image:");
    for (k, n) in &labels_hist {
        println!("  {k:>3} {n}");
    }
    if !placements_hist.is_empty() {
        println!("placements per image:");
        for (k, n) in &placements_hist {
            println!("  {k:>3} {n}");
        }
    }
    Ok(())
}
