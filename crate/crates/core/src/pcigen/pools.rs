use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PciError;
use crate::raster::{Bitmap, InstanceMask, Raster};
use crate::taxonomy::TaxonomyTable;

/// A background-free individual: its pixels, its mask in the same frame and
/// the taxon it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub image: Raster,
    pub mask: InstanceMask,
    pub taxon_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourcePools {
    pub backgrounds: Vec<Raster>,
    pub individuals: Vec<Individual>,
}

#[derive(Deserialize)]
struct IndividualEntry {
    image: PathBuf,
    mask: PathBuf,
    taxon_id: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PciError + '_ {
    move |source| PciError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl SourcePools {
    pub fn validate(&self, taxonomy: Option<&TaxonomyTable>) -> Result<(), PciError> {
        if self.backgrounds.is_empty() || self.individuals.is_empty() {
            return Err(PciError::Config(format!(
                "source pools need at least one background and one individual (have {} and {})",
                self.backgrounds.len(),
                self.individuals.len()
            )));
        }
        for (i, ind) in self.individuals.iter().enumerate() {
            if ind.mask.width() != ind.image.width() || ind.mask.height() != ind.image.height() {
                return Err(PciError::Config(format!("individual {i}: mask frame differs from image")));
            }
            if ind.mask.is_empty() {
                return Err(PciError::Config(format!("individual {i}: empty mask")));
            }
            if let Some(t) = taxonomy {
                if t.get(ind.taxon_id).is_none() {
                    return Err(PciError::Config(format!("individual {i}: unknown taxon {}", ind.taxon_id)));
                }
            }
        }
        Ok(())
    }

    /// Loads every `*.png` in `backgrounds_dir` (sorted by name) and the
    /// individuals listed in a JSON manifest of `{image, mask, taxon_id}`
    /// records. Paths in the manifest are relative to the manifest's
    /// directory; any non-zero mask pixel is foreground.
    pub fn load(backgrounds_dir: &Path, individuals_manifest: &Path) -> Result<Self, PciError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(backgrounds_dir)
            .map_err(io_err(backgrounds_dir))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_err(backgrounds_dir))?;
        files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
        files.sort();
        let backgrounds = files.iter().map(Raster::read_png).collect::<Result<Vec<_>, _>>()?;

        let bytes = std::fs::read(individuals_manifest).map_err(io_err(individuals_manifest))?;
        let entries: Vec<IndividualEntry> = serde_json::from_slice(&bytes).map_err(|source| PciError::Json {
            path: individuals_manifest.display().to_string(),
            source,
        })?;
        let base = individuals_manifest.parent().unwrap_or(Path::new("."));
        let mut individuals = Vec::with_capacity(entries.len());
        for e in entries {
            let image = Raster::read_png(base.join(&e.image))?;
            let gray = Raster::read_png(base.join(&e.mask))?.to_channels(1)?;
            let bits = Bitmap::from_fn(gray.width(), gray.height(), |x, y| gray.pixel(x, y)[0] != 0);
            individuals.push(Individual {
                image,
                mask: InstanceMask::encode(&bits),
                taxon_id: e.taxon_id,
            });
        }
        let pools = SourcePools { backgrounds, individuals };
        pools.validate(None)?;
        Ok(pools)
    }

    /// Procedural stand-ins for real source images; see [`SyntheticPools`].
    pub fn synthetic(spec: &SyntheticPools) -> Self {
        let backgrounds = (0..spec.backgrounds)
            .map(|i| synthetic_background(spec, i as u64))
            .collect();
        let mut individuals = Vec::new();
        for f in 0..spec.families {
            for k in 0..spec.individuals_per_family {
                let stream = 1_000_000 + (f * spec.individuals_per_family + k) as u64;
                individuals.push(synthetic_individual(spec, f, stream));
            }
        }
        SourcePools { backgrounds, individuals }
    }
}

/// Parameters of the procedural pools used when no real source images are
/// supplied. Individual `k` of family `f` carries taxon `200 + f`, a genus
/// of [`TaxonomyTable::builtin`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPools {
    pub seed: u64,
    pub backgrounds: usize,
    /// `[width, height]` of each background; they are resized to the canvas.
    pub background_size: [u32; 2],
    pub families: u32,
    pub individuals_per_family: u32,
    /// Inclusive body-length range in pixels.
    pub length_range: [u32; 2],
}

impl Default for SyntheticPools {
    fn default() -> Self {
        SyntheticPools {
            seed: 0,
            backgrounds: 180,
            background_size: [256, 256],
            families: 16,
            individuals_per_family: 10,
            length_range: [48, 160],
        }
    }
}

impl SyntheticPools {
    pub fn validate(&self) -> Result<(), PciError> {
        let [w, h] = self.background_size;
        let [lo, hi] = self.length_range;
        if self.backgrounds == 0 || self.families == 0 || self.individuals_per_family == 0 {
            return Err(PciError::Config("synthetic pools must not be empty".into()));
        }
        if self.families > 16 {
            return Err(PciError::Config("the built-in taxonomy has 16 families".into()));
        }
        if w == 0 || h == 0 || lo < 8 || hi < lo {
            return Err(PciError::Config("synthetic pool sizes out of range".into()));
        }
        Ok(())
    }
}

fn synthetic_background(spec: &SyntheticPools, index: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let [w, h] = spec.background_size;
    const GRID: usize = 9;
    let lattice: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base: [f64; 3] = [rng.gen_range(190.0..225.0), rng.gen_range(190.0..225.0), rng.gen_range(175.0..215.0)];
    let contrast = rng.gen_range(6.0..22.0);
    let specks: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(0..40))
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.6..3.5),
                rng.gen_range(40.0..120.0),
            )
        })
        .collect();
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    noise.set_stream(index);
    Raster::from_fn(w, h, 3, |x, y| {
        let gx = x as f64 / w as f64 * (GRID - 1) as f64;
        let gy = y as f64 / h as f64 * (GRID - 1) as f64;
        let (ix, iy) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at = |i: usize, j: usize| lattice[j * GRID + i];
        let field = at(ix, iy) * (1.0 - fx) * (1.0 - fy)
            + at(ix + 1, iy) * fx * (1.0 - fy)
            + at(ix, iy + 1) * (1.0 - fx) * fy
            + at(ix + 1, iy + 1) * fx * fy;
        let mut shade = field * contrast + noise.gen_range(-4.0..4.0);
        for &(sx, sy, r, depth) in &specks {
            let d2 = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
            if d2 <= r * r {
                shade -= depth;
            }
        }
        base.map(|b| (b + shade).round().clamp(0.0, 255.0) as u8)
    })
    .expect("non-empty background")
}

fn synthetic_individual(spec: &SyntheticPools, family: u32, stream: u64) -> Individual {
    // Family traits come from their own stream so siblings look alike.
    let mut fam = ChaCha8Rng::seed_from_u64(spec.seed);
    fam.set_stream(2_000_000 + family as u64);
    let tint: [f64; 3] = [fam.gen_range(60.0..200.0), fam.gen_range(50.0..180.0), fam.gen_range(30.0..150.0)];
    let aspect = fam.gen_range(0.3..0.85);
    let limbs = fam.gen_range(0..5u32);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let length = rng.gen_range(spec.length_range[0]..=spec.length_range[1]) as f64;
    let (a, b) = (length / 2.0, (length * aspect * rng.gen_range(0.9..1.1) / 2.0).max(2.0));
    let margin = (0.3 * length).ceil();
    let w = (2.0 * (a + margin)).ceil() as u32;
    let h = (2.0 * (b + margin)).ceil() as u32;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let harmonics: Vec<(f64, f64)> = (2..5)
        .map(|_| (rng.gen_range(0.0..0.08), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let strokes: Vec<(f64, f64, f64, f64)> = (0..limbs)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let reach = rng.gen_range(0.15..0.3) * length;
            let (c, s) = (theta.cos(), theta.sin());
            let (x0, y0) = (cx + 0.8 * a * c, cy + 0.8 * b * s);
            (x0, y0, x0 + reach * c, y0 + reach * s)
        })
        .collect();

    let radius = |x: f64, y: f64| {
        let (dx, dy) = ((x - cx) / a, (y - cy) / b);
        let theta = dy.atan2(dx);
        let bound: f64 = 1.0 + harmonics.iter().enumerate().map(|(k, (amp, ph))| amp * ((k + 2) as f64 * theta + ph).cos()).sum::<f64>();
        (dx * dx + dy * dy).sqrt() / bound
    };
    let on_stroke = |x: f64, y: f64| {
        strokes.iter().any(|&(x0, y0, x1, y1)| {
            let (vx, vy) = (x1 - x0, y1 - y0);
            let t = (((x - x0) * vx + (y - y0) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
            let (px, py) = (x0 + t * vx - x, y0 + t * vy - y);
            px * px + py * py <= 1.0
        })
    };
    let bits = Bitmap::from_fn(w, h, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        radius(px, py) <= 1.0 || on_stroke(px, py)
    });
    let image = Raster::from_fn(w, h, 3, |x, y| {
        if !bits.get(x, y) {
            return [255, 255, 255];
        }
        let r = radius(x as f64 + 0.5, y as f64 + 0.5).min(1.0);
        let shade = 0.55 + 0.45 * r + rng.gen_range(-0.06..0.06);
        tint.map(|t| (t * shade).round().clamp(0.0, 255.0) as u8)
    })
    .expect("non-empty individual");
    Individual {
        image,
        mask: InstanceMask::encode(&bits),
        taxon_id: 200 + family,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_pools_are_sound_and_seeded() {
        let spec = SyntheticPools {
            backgrounds: 3,
            families: 4,
            individuals_per_family: 2,
            ..SyntheticPools::default()
        };
        let p = SourcePools::synthetic(&spec);
        assert_eq!((p.backgrounds.len(), p.individuals.len()), (3, 8));
        p.validate(Some(&TaxonomyTable::builtin())).unwrap();
        assert_eq!(p, SourcePools::synthetic(&spec));
        let other = SourcePools::synthetic(&SyntheticPools { seed: 1, ..spec });
        assert_ne!(p.backgrounds[0], other.backgrounds[0]);
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bg = dir.path().join("bg");
        std::fs::create_dir(&bg).unwrap();
        Raster::filled(8, 6, 3, 200).unwrap().write_png(bg.join("b.png")).unwrap();
        Raster::filled(8, 6, 3, 100).unwrap().write_png(bg.join("a.png")).unwrap();
        std::fs::write(bg.join("notes.txt"), "x").unwrap();
        Raster::filled(4, 4, 3, 50).unwrap().write_png(dir.path().join("i.png")).unwrap();
        let mask = Raster::from_fn(4, 4, 1, |x, _| if x < 2 { [255; 3] } else { [0; 3] }).unwrap();
        mask.write_png(dir.path().join("m.png")).unwrap();
        let manifest = dir.path().join("individuals.json");
        std::fs::write(&manifest, r#"[{"image":"i.png","mask":"m.png","taxon_id":203}]"#).unwrap();
        let p = SourcePools::load(&bg, &manifest).unwrap();
        assert_eq!(p.backgrounds.len(), 2);
        assert_eq!(p.backgrounds[0].pixel(0, 0), &[100, 100, 100]);
        assert_eq!(p.individuals[0].mask.area(), 8);
        assert_eq!(p.individuals[0].taxon_id, 203);
        let err = SourcePools::load(&dir.path().join("missing"), &manifest).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
