//! Shape contract of a ViT encoder with a multi-scale feature pyramid and MAE
//! masking, as pure tensor geometry (no weights).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::Raster;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeomError {
    #[error("expected {expected}, got {got}")]
    Size { expected: String, got: String },
    #[error("invalid encoder geometry: {0}")]
    Config(String),
    #[error("malformed index partition: {0}")]
    MalformedPartition(String),
}

type Result<T> = std::result::Result<T, GeomError>;

/// Pyramid strides relative to the input, finest first.
pub const PYRAMID_STRIDES: [u32; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_size: u32,
    pub patch_size: u32,
    pub depth: u32,
    /// 1-based transformer blocks whose outputs feed the pyramid.
    pub tap_layers: Vec<u32>,
    pub embed_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            input_size: 384,
            patch_size: 32,
            depth: 24,
            tap_layers: vec![5, 8, 16],
            embed_dim: 1024,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GeomError::Config(m));
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return bad(format!("input {} is not a multiple of patch {}", self.input_size, self.patch_size));
        }
        if self.embed_dim == 0 || self.depth == 0 {
            return bad("depth and embed_dim must be positive".into());
        }
        if let Some(l) = self.tap_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return bad(format!("tap layer {l} outside [1, {}]", self.depth));
        }
        if !self.tap_layers.windows(2).all(|w| w[0] < w[1]) {
            return bad("tap layers must be strictly increasing".into());
        }
        Ok(())
    }

    /// Tokens per side.
    pub fn grid_side(&self) -> u32 {
        self.input_size / self.patch_size
    }

    /// Side of the pyramid level at `stride`.
    pub fn level_side(&self, stride: u32) -> u32 {
        self.input_size / stride
    }
}

/// Row-major 2-D arrangement of `dim`-wide f32 vectors. Used both as a token
/// sequence (index `r * cols + c`) and as a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

/// A token sequence with its grid shape.
pub type TokenGrid = Grid;

/// A `rows × cols × dim` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Grid);

impl Grid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(GeomError::Size {
                expected: format!("{} values for {rows}x{cols}x{dim}", rows * cols * dim),
                got: data.len().to_string(),
            });
        }
        Ok(Grid { rows, cols, dim, data })
    }

    pub fn filled(rows: usize, cols: usize, dim: usize, value: f32) -> Self {
        Grid {
            rows,
            cols,
            dim,
            data: vec![value; rows * cols * dim],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols * dim);
        for r in 0..rows {
            for c in 0..cols {
                for d in 0..dim {
                    data.push(f(r, c, d));
                }
            }
        }
        Grid { rows, cols, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at(&self, r: usize, c: usize) -> &[f32] {
        self.token(r * self.cols + c)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn expect_size(what: &str, want: (u32, u32), got: (u32, u32)) -> Result<()> {
    if want != got {
        return Err(GeomError::Size {
            expected: format!("{what} {}x{}", want.0, want.1),
            got: format!("{}x{}", got.0, got.1),
        });
    }
    Ok(())
}

/// Flattens each `patch × patch` block into one token (pixel rows, then
/// columns, then channels).
pub fn patchify(img: &Raster, spec: &EncoderSpec) -> Result<TokenGrid> {
    spec.validate()?;
    let s = spec.input_size;
    expect_size("input", (s, s), (img.width(), img.height()))?;
    let (p, side, ch) = (spec.patch_size as usize, spec.grid_side() as usize, img.channels() as usize);
    let mut data = Vec::with_capacity(img.data().len());
    for gr in 0..side {
        for gc in 0..side {
            for y in 0..p {
                let start = img.index((gc * p) as u32, (gr * p + y) as u32);
                data.extend(img.data()[start..start + p * ch].iter().map(|&v| v as f32));
            }
        }
    }
    Grid::new(side, side, p * p * ch, data)
}

/// Inverse of [`patchify`]. Token values are rounded and clamped to bytes.
pub fn unpatchify(tg: &TokenGrid, spec: &EncoderSpec, channels: u8) -> Result<Raster> {
    spec.validate()?;
    let side = spec.grid_side() as usize;
    let p = spec.patch_size as usize;
    let ch = channels as usize;
    if tg.rows != side || tg.cols != side || tg.dim != p * p * ch {
        return Err(GeomError::Size {
            expected: format!("{side}x{side} grid of {}-wide tokens", p * p * ch),
            got: format!("{}x{} grid of {}-wide tokens", tg.rows, tg.cols, tg.dim),
        });
    }
    let s = spec.input_size;
    let mut img = Raster::filled(s, s, channels, 0).map_err(|e| GeomError::Config(e.to_string()))?;
    for gr in 0..side {
        for gc in 0..side {
            let tok = tg.at(gr, gc);
            for y in 0..p {
                let start = img.index((gc * p) as u32, (gr * p + y) as u32);
                let row = &tok[y * p * ch..(y + 1) * p * ch];
                for (d, &v) in img.data_mut()[start..start + p * ch].iter_mut().zip(row) {
                    *d = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(img)
}

/// Token `i` lands at `(i / cols, i % cols)`.
pub fn tokens_to_map(tg: &TokenGrid) -> FeatureMap {
    FeatureMap(tg.clone())
}

pub fn map_to_tokens(map: &FeatureMap) -> TokenGrid {
    map.0.clone()
}

pub fn upsample_nearest(map: &FeatureMap, factor: usize) -> FeatureMap {
    let g = &map.0;
    FeatureMap(Grid::from_fn(g.rows * factor, g.cols * factor, g.dim, |r, c, d| {
        g.at(r / factor, c / factor)[d]
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub layer: u32,
    pub stride: u32,
    pub map: FeatureMap,
}

/// Upsamples three grid-sized tap maps to strides 8, 16 and 32; the
/// shallowest tap becomes the finest level.
pub fn build_pyramid(taps: &BTreeMap<u32, FeatureMap>, spec: &EncoderSpec) -> Result<Vec<PyramidLevel>> {
    spec.validate()?;
    if taps.len() != PYRAMID_STRIDES.len() {
        return Err(GeomError::Config(format!("pyramid needs 3 tap maps, got {}", taps.len())));
    }
    if !spec.patch_size.is_multiple_of(32) {
        return Err(GeomError::Config(format!(
            "patch {} is not a multiple of the coarsest stride 32",
            spec.patch_size
        )));
    }
    let side = spec.grid_side() as usize;
    let mut levels = Vec::with_capacity(3);
    for ((&layer, map), stride) in taps.iter().zip(PYRAMID_STRIDES) {
        let g = &map.0;
        if g.rows != side || g.cols != side || g.dim != spec.embed_dim {
            return Err(GeomError::Size {
                expected: format!("layer {layer} map {side}x{side}x{}", spec.embed_dim),
                got: format!("{}x{}x{}", g.rows, g.cols, g.dim),
            });
        }
        let factor = (spec.patch_size / stride) as usize;
        levels.push(PyramidLevel {
            layer,
            stride,
            map: upsample_nearest(map, factor),
        });
    }
    Ok(levels)
}

/// The unmasked part of a token grid, with each token's original index.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleTokens {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Ascending.
    pub indices: Vec<usize>,
    /// `indices.len() × dim` values, in `indices` order.
    pub tokens: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeSplit {
    pub visible: VisibleTokens,
    /// Ascending.
    pub masked: Vec<usize>,
}

pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Masks `round(ratio × N)` tokens chosen by a seeded shuffle.
pub fn mae_mask(tg: &TokenGrid, ratio: f64, seed: u64) -> Result<MaeSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(GeomError::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n = tg.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = masked_count(n, ratio);
    let mut masked = order[..k].to_vec();
    let mut indices = order[k..].to_vec();
    masked.sort_unstable();
    indices.sort_unstable();
    let tokens = indices.iter().flat_map(|&i| tg.token(i).iter().copied()).collect();
    Ok(MaeSplit {
        visible: VisibleTokens {
            rows: tg.rows,
            cols: tg.cols,
            dim: tg.dim,
            indices,
            tokens,
        },
        masked,
    })
}

/// What to put in masked slots.
#[derive(Clone, Debug, PartialEq)]
pub enum Fill {
    /// The same token in every masked slot.
    Token(Vec<f32>),
    /// One token per masked index, in the masked list's order.
    PerSlot(Vec<f32>),
}

pub fn mae_restore(visible: &VisibleTokens, masked: &[usize], fill: &Fill) -> Result<TokenGrid> {
    let (n, dim) = (visible.rows * visible.cols, visible.dim);
    let bad = |m: String| Err(GeomError::MalformedPartition(m));
    if visible.tokens.len() != visible.indices.len() * dim {
        return bad(format!(
            "{} visible indices but {} token values",
            visible.indices.len(),
            visible.tokens.len()
        ));
    }
    let mut seen = vec![false; n];
    for &i in visible.indices.iter().chain(masked) {
        if i >= n {
            return bad(format!("index {i} outside [0, {n})"));
        }
        if std::mem::replace(&mut seen[i], true) {
            return bad(format!("index {i} listed twice"));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return bad(format!("index {i} missing"));
    }
    let fill_ok = match fill {
        Fill::Token(t) => t.len() == dim,
        Fill::PerSlot(t) => t.len() == masked.len() * dim,
    };
    if !masked.is_empty() && !fill_ok {
        return Err(GeomError::Size {
            expected: format!("fill of {dim}-wide tokens for {} masked slots", masked.len()),
            got: match fill {
                Fill::Token(t) | Fill::PerSlot(t) => format!("{} values", t.len()),
            },
        });
    }
    let mut data = vec![0.0; n * dim];
    for (k, &i) in visible.indices.iter().enumerate() {
        data[i * dim..(i + 1) * dim].copy_from_slice(&visible.tokens[k * dim..(k + 1) * dim]);
    }
    for (k, &i) in masked.iter().enumerate() {
        let src = match fill {
            Fill::Token(t) => &t[..],
            Fill::PerSlot(t) => &t[k * dim..(k + 1) * dim],
        };
        data[i * dim..(i + 1) * dim].copy_from_slice(src);
    }
    Grid::new(visible.rows, visible.cols, dim, data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub checks: Vec<Check>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Runs the geometry suite for `spec` with MAE ratio `mask_ratio`.
pub fn self_check(spec: &EncoderSpec, mask_ratio: f64) -> CheckReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, outcome: std::result::Result<String, String>| {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    };
    if let Err(e) = spec.validate() {
        push("spec", Err(e.to_string()));
        return CheckReport { checks };
    }
    let side = spec.grid_side() as usize;
    let n = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let s = spec.input_size;
    let img = Raster::from_fn(s, s, 3, |_, _| rng.gen()).expect("validated size");

    push(
        "token grid",
        match patchify(&img, spec) {
            Ok(tg) if tg.rows == side && tg.cols == side => Ok(format!(
                "{s}/{} -> {} tokens on {side}x{side}",
                spec.patch_size,
                tg.len()
            )),
            Ok(tg) => Err(format!("grid {}x{}", tg.rows, tg.cols)),
            Err(e) => Err(e.to_string()),
        },
    );
    push(
        "patchify round trip",
        match patchify(&img, spec).and_then(|tg| unpatchify(&tg, spec, 3)) {
            Ok(back) if back == img => Ok("exact".into()),
            Ok(_) => Err("pixels differ".into()),
            Err(e) => Err(e.to_string()),
        },
    );
    let flat = Raster::filled(s, s, 3, 77).expect("validated size");
    push(
        "constant image",
        match patchify(&flat, spec) {
            Ok(tg) if (1..tg.len()).all(|i| tg.token(i) == tg.token(0)) => Ok("all tokens identical".into()),
            Ok(_) => Err("tokens differ".into()),
            Err(e) => Err(e.to_string()),
        },
    );
    let tokens = Grid::from_fn(side, side, 4, |r, c, d| (r * side + c) as f32 * 10.0 + d as f32);
    let map = tokens_to_map(&tokens);
    push("token map", {
        let probe = n.min(side + 1);
        let (r, c) = (probe / side, probe % side);
        if map_to_tokens(&map) != tokens {
            Err("map -> tokens is not the identity".into())
        } else if map.0.at(r, c) != tokens.token(probe) {
            Err(format!("token {probe} not at ({r}, {c})"))
        } else {
            Ok(format!("{side}x{side} map; token {probe} at ({r}, {c}); round trip exact"))
        }
    });

    let taps: BTreeMap<u32, FeatureMap> = spec
        .tap_layers
        .iter()
        .map(|&l| (l, FeatureMap(Grid::filled(side, side, spec.embed_dim, l as f32))))
        .collect();
    push(
        "pyramid",
        match build_pyramid(&taps, spec) {
            Ok(levels) => {
                let shapes: Vec<String> = levels
                    .iter()
                    .map(|l| format!("{}x{}x{}", l.map.0.rows, l.map.0.cols, l.map.0.dim))
                    .collect();
                let ok = levels.iter().all(|l| {
                    let want = spec.level_side(l.stride) as usize;
                    l.map.0.rows == want
                        && l.map.0.cols == want
                        && l.map.0.dim == spec.embed_dim
                        && l.map.0.data.iter().all(|&v| v == l.layer as f32)
                });
                let names: Vec<String> = levels.iter().map(|l| format!("layer {} -> 1/{}", l.layer, l.stride)).collect();
                let detail = format!("{} ({})", shapes.join(" / "), names.join(", "));
                if ok {
                    Ok(detail)
                } else {
                    Err(detail)
                }
            }
            Err(e) => Err(e.to_string()),
        },
    );

    push(
        "mae mask",
        match (mae_mask(&tokens, mask_ratio, 7), mae_mask(&tokens, mask_ratio, 7)) {
            (Ok(a), Ok(b)) => {
                let want = masked_count(n, mask_ratio);
                let mut all: Vec<usize> = a.visible.indices.iter().chain(&a.masked).copied().collect();
                all.sort_unstable();
                let partition = all == (0..n).collect::<Vec<_>>();
                let detail = format!(
                    "ratio {mask_ratio} masks {} of {n}, {} visible",
                    a.masked.len(),
                    a.visible.indices.len()
                );
                if a == b && partition && a.masked.len() == want {
                    Ok(detail)
                } else {
                    Err(detail)
                }
            }
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        },
    );
    push(
        "mae restore",
        mae_mask(&tokens, mask_ratio, 7)
            .and_then(|split| {
                let fill: Vec<f32> = split.masked.iter().flat_map(|&i| tokens.token(i).iter().copied()).collect();
                mae_restore(&split.visible, &split.masked, &Fill::PerSlot(fill))
            })
            .map_err(|e| e.to_string())
            .and_then(|back| {
                if back == tokens {
                    Ok("exact".into())
                } else {
                    Err("restored tokens differ".into())
                }
            }),
    );
    push("mask monotone", {
        let counts: Vec<usize> = (1..100).map(|k| masked_count(n, k as f64 / 100.0)).collect();
        if counts.windows(2).all(|w| w[0] <= w[1]) {
            Ok(format!("masked count non-decreasing over ratios 0.01..0.99 ({}..{})", counts[0], counts[98]))
        } else {
            Err("masked count decreases".into())
        }
    });
    CheckReport { checks }
}
