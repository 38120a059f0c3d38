//! Pseudo community image (PCI) synthesis: seeded recipes that paste
//! transformed individuals onto blurred backgrounds, with visible-pixel
//! instance labels.

mod pools;

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pools::{Individual, SourcePools, SyntheticPools};

use crate::dataset_io::{write_manifest, Annotation, AnnotationSet, DatasetError, ImageRecord, Provenance};
use crate::raster::{affine_transform, composite_into, gaussian_blur, transform_mask, InstanceMask, Raster, RasterError};
use crate::taxonomy::{LabelRank, TaxonomyError, TaxonomyTable};

/// Draws of a degenerate transform before giving up on a placement.
pub const MAX_TRANSFORM_ATTEMPTS: u32 = 20;
const MAX_OFFSET_ATTEMPTS: u32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum PciError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image {image_index}, placement {placement}: every transform in {attempts} draws was degenerate")]
    Degenerate {
        image_index: u64,
        placement: usize,
        attempts: u32,
    },
    #[error("recipe does not match the source pools: {0}")]
    Recipe(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PciConfig {
    /// `[width, height]`.
    pub canvas: [u32; 2],
    /// Inclusive.
    pub count_range: [u32; 2],
    /// Half-open.
    pub sigma_range: [f64; 2],
    /// Degrees, half-open.
    pub rotation_range: [f64; 2],
    /// Inclusive.
    pub scale_range: [f64; 2],
    /// Per-axis flip probability for the background and each individual.
    pub flip_prob: f64,
    pub min_visible_fraction: f64,
    pub seed: u64,
    pub label_rank: LabelRank,
}

impl Default for PciConfig {
    fn default() -> Self {
        PciConfig {
            canvas: [1000, 1000],
            count_range: [6, 10],
            sigma_range: [0.0, 2.0],
            rotation_range: [0.0, 360.0],
            scale_range: [0.5, 1.5],
            flip_prob: 0.5,
            min_visible_fraction: 0.0,
            seed: 0,
            label_rank: LabelRank::Family,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), PciError> {
    if ok {
        Ok(())
    } else {
        Err(PciError::Config(msg()))
    }
}

impl PciConfig {
    pub fn validate(&self) -> Result<(), PciError> {
        let [w, h] = self.canvas;
        check(w > 0 && h > 0, || format!("canvas {w}x{h} is empty"))?;
        let [clo, chi] = self.count_range;
        check(clo >= 1 && clo <= chi, || format!("count_range [{clo}, {chi}] needs 1 <= low <= high"))?;
        let [slo, shi] = self.sigma_range;
        check(slo >= 0.0 && slo <= shi && shi.is_finite(), || {
            format!("sigma_range [{slo}, {shi}) needs 0 <= low <= high")
        })?;
        let [rlo, rhi] = self.rotation_range;
        check(rlo.is_finite() && rhi.is_finite() && rlo <= rhi, || {
            format!("rotation_range [{rlo}, {rhi}) needs low <= high")
        })?;
        let [glo, ghi] = self.scale_range;
        check(glo > 0.0 && glo <= ghi && ghi.is_finite(), || {
            format!("scale_range [{glo}, {ghi}] needs 0 < low <= high")
        })?;
        check((0.0..=1.0).contains(&self.flip_prob), || {
            format!("flip_prob {} outside [0, 1]", self.flip_prob)
        })?;
        check((0.0..=1.0).contains(&self.min_visible_fraction), || {
            format!("min_visible_fraction {} outside [0, 1]", self.min_visible_fraction)
        })
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub individual_id: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle: f64,
    pub scale: f64,
    /// Canvas position of the transformed individual's top-left corner.
    pub offset: [i64; 2],
}

/// Everything needed to replay one PCI from the source pools. Placements
/// are in paste order; later ones occlude earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PciRecipe {
    pub background_id: usize,
    pub bg_flip_h: bool,
    pub bg_flip_v: bool,
    pub sigma: f64,
    pub placements: Vec<Placement>,
}

impl PciRecipe {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("recipe serializes"))
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2], inclusive: bool) -> f64 {
    if hi <= lo {
        lo
    } else if inclusive {
        rng.gen_range(lo..=hi)
    } else {
        rng.gen_range(lo..hi)
    }
}

/// The generator for image `image_index`: ChaCha8 keyed by the seed, on its
/// own stream, so images can be drawn in any order.
pub fn image_rng(seed: u64, image_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_index);
    rng
}

/// Draws an offset at which some mask pixel lands on the canvas, uniformly
/// over all such offsets (rejection inside the bounding-box range).
fn draw_offset(rng: &mut ChaCha8Rng, mask: &InstanceMask, canvas: [u32; 2]) -> [i64; 2] {
    let [w, h] = canvas;
    let [bx, by, bw, bh] = mask.bbox().map(i64::from);
    let (xlo, xhi) = (-(bx + bw - 1), w as i64 - 1 - bx);
    let (ylo, yhi) = (-(by + bh - 1), h as i64 - 1 - by);
    for _ in 0..MAX_OFFSET_ATTEMPTS {
        let ox = rng.gen_range(xlo..=xhi);
        let oy = rng.gen_range(ylo..=yhi);
        if !mask.reframe(h, w, ox, oy).is_empty() {
            return [ox, oy];
        }
    }
    // Put the first set pixel at the canvas origin.
    let (start, _) = mask.runs().next().expect("non-empty mask");
    let mh = mask.height() as u64;
    [-((start / mh) as i64), -((start % mh) as i64)]
}

pub fn sample_recipe(cfg: &PciConfig, pools: &SourcePools, image_index: u64) -> Result<PciRecipe, PciError> {
    if pools.backgrounds.is_empty() || pools.individuals.is_empty() {
        return Err(PciError::Config("source pools are empty".into()));
    }
    let mut rng = image_rng(cfg.seed, image_index);
    let background_id = rng.gen_range(0..pools.backgrounds.len());
    let bg_flip_h = rng.gen_bool(cfg.flip_prob);
    let bg_flip_v = rng.gen_bool(cfg.flip_prob);
    let sigma = uniform(&mut rng, cfg.sigma_range, false);
    let count = rng.gen_range(cfg.count_range[0]..=cfg.count_range[1]) as usize;
    let mut placements = Vec::with_capacity(count);
    for p in 0..count {
        let individual_id = rng.gen_range(0..pools.individuals.len());
        let flip_h = rng.gen_bool(cfg.flip_prob);
        let flip_v = rng.gen_bool(cfg.flip_prob);
        let mask = &pools.individuals[individual_id].mask;
        let mut drawn = None;
        for _ in 0..MAX_TRANSFORM_ATTEMPTS {
            let angle = uniform(&mut rng, cfg.rotation_range, false);
            let scale = uniform(&mut rng, cfg.scale_range, true);
            match transform_mask(mask, flip_h, flip_v, angle, scale) {
                Ok(t) => {
                    drawn = Some((angle, scale, t));
                    break;
                }
                Err(RasterError::DegenerateTransform { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let (angle, scale, transformed) = drawn.ok_or(PciError::Degenerate {
            image_index,
            placement: p,
            attempts: MAX_TRANSFORM_ATTEMPTS,
        })?;
        let offset = draw_offset(&mut rng, &transformed, cfg.canvas);
        placements.push(Placement {
            individual_id,
            flip_h,
            flip_v,
            angle,
            scale,
            offset,
        });
    }
    Ok(PciRecipe {
        background_id,
        bg_flip_h,
        bg_flip_v,
        sigma,
        placements,
    })
}

/// One labeled instance of a synthesized image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    /// Index into the recipe's placements.
    pub placement: usize,
    pub taxon_id: u32,
    /// Visible pixels, in the canvas frame.
    pub mask: InstanceMask,
    /// Visible area over the area of the whole transformed individual.
    pub visible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub image: Raster,
    pub instances: Vec<SynthInstance>,
}

fn individual_for<'a>(pools: &'a SourcePools, p: &Placement) -> Result<&'a Individual, PciError> {
    pools
        .individuals
        .get(p.individual_id)
        .ok_or_else(|| PciError::Recipe(format!("individual {} out of range", p.individual_id)))
}

/// Canvas pixels covered by a placement, before any occlusion.
pub fn placement_footprint(p: &Placement, cfg: &PciConfig, pools: &SourcePools) -> Result<InstanceMask, PciError> {
    let ind = individual_for(pools, p)?;
    let t = transform_mask(&ind.mask, p.flip_h, p.flip_v, p.angle, p.scale)?;
    let [w, h] = cfg.canvas;
    Ok(t.reframe(h, w, p.offset[0], p.offset[1]))
}

/// The background after fitting to the canvas, flipping and blurring.
pub fn processed_background(recipe: &PciRecipe, cfg: &PciConfig, pools: &SourcePools) -> Result<Raster, PciError> {
    let bg = pools
        .backgrounds
        .get(recipe.background_id)
        .ok_or_else(|| PciError::Recipe(format!("background {} out of range", recipe.background_id)))?;
    let [w, h] = cfg.canvas;
    let fitted;
    let bg = if bg.width() != w || bg.height() != h {
        fitted = bg.resized(w, h)?;
        &fitted
    } else {
        bg
    };
    let flipped = bg.flipped(recipe.bg_flip_h, recipe.bg_flip_v).to_channels(3)?;
    Ok(gaussian_blur(&flipped, recipe.sigma))
}

/// Replays a recipe. Labels are visible masks: each instance keeps the
/// pixels of its individual that land on the canvas and are not covered by a
/// later paste. Instances with no visible pixel, or a visible fraction below
/// `cfg.min_visible_fraction`, are dropped from the labels (their pixels are
/// still painted).
pub fn synthesize(recipe: &PciRecipe, cfg: &PciConfig, pools: &SourcePools) -> Result<Synthesis, PciError> {
    let mut canvas = processed_background(recipe, cfg, pools)?;
    let [w, h] = cfg.canvas;
    let mut pasted = Vec::with_capacity(recipe.placements.len());
    for p in &recipe.placements {
        let ind = individual_for(pools, p)?;
        let (img, mask) = affine_transform(&ind.image, &ind.mask, p.flip_h, p.flip_v, p.angle, p.scale)?;
        composite_into(&mut canvas, &img, &mask, (p.offset[0], p.offset[1]))?;
        let footprint = mask.reframe(h, w, p.offset[0], p.offset[1]);
        pasted.push((ind.taxon_id, footprint, mask.area()));
    }
    let mut covered = InstanceMask::empty(h, w);
    let mut instances = Vec::new();
    for (i, (taxon_id, footprint, full)) in pasted.into_iter().enumerate().rev() {
        let visible = footprint.difference(&covered)?;
        covered = covered.union(&footprint)?;
        let visible_fraction = visible.area() as f64 / full as f64;
        if visible.is_empty() || visible_fraction < cfg.min_visible_fraction {
            continue;
        }
        instances.push(SynthInstance {
            placement: i,
            taxon_id,
            mask: visible,
            visible_fraction,
        });
    }
    instances.reverse();
    Ok(Synthesis { image: canvas, instances })
}

/// Background bytes above which [`generate_dataset`] resizes backgrounds per
/// image instead of once up front.
const FIT_BUDGET: u64 = 768 << 20;

fn fit_backgrounds(cfg: &PciConfig, pools: &SourcePools, used: &BTreeSet<usize>) -> Result<Option<SourcePools>, PciError> {
    let [w, h] = cfg.canvas;
    let needs = used.iter().any(|&i| pools.backgrounds[i].width() != w || pools.backgrounds[i].height() != h);
    let bytes = used.len() as u64 * w as u64 * h as u64 * 3;
    if !needs || bytes > FIT_BUDGET {
        return Ok(None);
    }
    // Unused backgrounds stay as they are; synthesis fits on the fly anyway.
    let backgrounds = pools
        .backgrounds
        .par_iter()
        .enumerate()
        .map(|(i, b)| if used.contains(&i) { b.resized(w, h) } else { Ok(b.clone()) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(SourcePools {
        backgrounds,
        individuals: pools.individuals.clone(),
    }))
}

pub fn image_file_name(image_id: u64) -> String {
    format!("images/{image_id:06}.png")
}

/// Synthesizes `n_images` PCIs into `out_dir/images/NNNNNN.png` and writes
/// `out_dir/annotations.json`. Image `i` (0-based) gets id `i + 1` and is
/// drawn from generator stream `i`. Categories are the ancestors at
/// `cfg.label_rank` of every pooled individual, sorted by id. Runs on the
/// current rayon pool; the manifest does not depend on its size.
pub fn generate_dataset(
    cfg: &PciConfig,
    pools: &SourcePools,
    taxonomy: &TaxonomyTable,
    n_images: u64,
    out_dir: &Path,
) -> Result<AnnotationSet, PciError> {
    cfg.validate()?;
    pools.validate(Some(taxonomy))?;
    let mut category_ids = BTreeSet::new();
    let mut label_of = std::collections::BTreeMap::new();
    for ind in &pools.individuals {
        let anc = taxonomy.ancestor_at(ind.taxon_id, cfg.label_rank)?;
        category_ids.insert(anc.id);
        label_of.insert(ind.taxon_id, anc.id);
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| PciError::Io {
        path: images_dir.display().to_string(),
        source,
    })?;
    let recipes = (0..n_images)
        .into_par_iter()
        .map(|index| sample_recipe(cfg, pools, index))
        .collect::<Result<Vec<_>, PciError>>()?;
    let used = recipes.iter().map(|r| r.background_id).collect();
    let fitted = fit_backgrounds(cfg, pools, &used)?;
    let pools = fitted.as_ref().unwrap_or(pools);

    let per_image = recipes
        .into_par_iter()
        .enumerate()
        .map(|(index, recipe)| {
            let index = index as u64;
            let synth = synthesize(&recipe, cfg, pools)?;
            let id = index + 1;
            let file_name = image_file_name(id);
            synth.image.write_png(out_dir.join(&file_name))?;
            let record = ImageRecord {
                id,
                file_name,
                width: cfg.canvas[0],
                height: cfg.canvas[1],
                placements: Some(recipe.placements.len() as u32),
                recipe_digest: Some(recipe.digest()),
            };
            Ok((record, synth.instances))
        })
        .collect::<Result<Vec<_>, PciError>>()?;

    let mut aset = AnnotationSet {
        info: Provenance {
            seed: Some(cfg.seed),
            config_digest: Some(cfg.digest()),
            config: Some(serde_json::to_value(cfg).expect("config serializes")),
            ..Provenance::default()
        },
        categories: category_ids
            .iter()
            .map(|id| taxonomy.get(*id).expect("ancestor exists").to_category())
            .collect(),
        ..AnnotationSet::default()
    };
    let mut next_id = 1;
    for (record, instances) in per_image {
        for inst in instances {
            let mut a = Annotation::from_mask(next_id, record.id, label_of[&inst.taxon_id], &inst.mask);
            a.visible_fraction = Some(inst.visible_fraction);
            aset.annotations.push(a);
            next_id += 1;
        }
        aset.images.push(record);
    }
    write_manifest(&aset, out_dir.join("annotations.json"))?;
    Ok(aset)
}

#[cfg(test)]
mod tests;
