//! Overlay rendering of ground truth or detections for visual inspection.

use serde::{Deserialize, Serialize};

use crate::dataset_io::{AnnotationSet, DetectionSet};
use crate::raster::{InstanceMask, Raster, RasterError};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid overlay style: {0}")]
    Style(String),
    #[error("item {index}: mask is {mask_w}x{mask_h}, image is {img_w}x{img_h}")]
    Frame {
        index: usize,
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayStyle {
    pub alpha: f64,
    pub draw_contours: bool,
    pub draw_labels: bool,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle {
            alpha: 0.4,
            draw_contours: true,
            draw_labels: true,
        }
    }
}

impl OverlayStyle {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RenderError::Style(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// 64 well-separated colours: 16 hues at 4 lightness/saturation tiers.
const PALETTE: [[u8; 3]; 64] = {
    const HUES: [[u8; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    let mut out = [[0u8; 3]; 64];
    let mut i = 0;
    while i < 64 {
        let base = HUES[i % 16];
        let tier = (i / 16) as u32;
        let mut c = 0;
        while c < 3 {
            let v = base[c] as u32;
            // tier 0 as is, 1 darker, 2 lighter, 3 darker still
            out[i][c] = match tier {
                0 => v,
                1 => v * 2 / 3,
                2 => v + (255 - v) / 2,
                _ => v / 3,
            } as u8;
            c += 1;
        }
        i += 1;
    }
    out
};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn palette_color(category_id: u32) -> [u8; 3] {
    PALETTE[(splitmix64(category_id as u64) % 64) as usize]
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayItem {
    pub mask: InstanceMask,
    pub category_id: u32,
    pub score: Option<f64>,
}

pub fn items_from_annotations(aset: &AnnotationSet, image_id: u64) -> Result<Vec<OverlayItem>, RasterError> {
    aset.annotations
        .iter()
        .filter(|a| a.image_id == image_id)
        .map(|a| {
            Ok(OverlayItem {
                mask: a.segmentation.to_mask()?,
                category_id: a.category_id,
                score: None,
            })
        })
        .collect()
}

/// Detections of one image, lowest score first so the best ones end up on
/// top.
pub fn items_from_detections(dets: &DetectionSet, image_id: u64) -> Result<Vec<OverlayItem>, RasterError> {
    let mut picked: Vec<_> = dets.0.iter().filter(|d| d.image_id == image_id).collect();
    picked.sort_by(|a, b| a.score.total_cmp(&b.score).then(b.id.cmp(&a.id)));
    picked
        .into_iter()
        .map(|d| {
            Ok(OverlayItem {
                mask: d.segmentation.to_mask()?,
                category_id: d.category_id,
                score: Some(d.score),
            })
        })
        .collect()
}

// 3x5 glyphs, one row per entry, bit 2 = left column.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        ' ' => [0, 0, 0, 0, 0],
        _ => return None,
    })
}

fn shade(color: [u8; 3], channels: u8) -> [u8; 3] {
    if channels == 1 {
        let l = (299 * color[0] as u32 + 587 * color[1] as u32 + 114 * color[2] as u32 + 500) / 1000;
        [l as u8; 3]
    } else {
        color
    }
}

fn put(out: &mut Raster, x: i64, y: i64, color: [u8; 3]) {
    if x < 0 || y < 0 || x >= out.width() as i64 || y >= out.height() as i64 {
        return;
    }
    let c = out.channels() as usize;
    out.pixel_mut(x as u32, y as u32).copy_from_slice(&color[..c]);
}

/// Draws `text` with its top-left at `(x, y)` on a dark backing box.
fn draw_text(out: &mut Raster, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let glyphs: Vec<[u8; 5]> = text.chars().filter_map(glyph).collect();
    let width = glyphs.len() as i64 * 4 + 1;
    let dark = shade([0, 0, 0], out.channels());
    for dy in 0..7 {
        for dx in 0..width {
            put(out, x + dx, y + dy, dark);
        }
    }
    for (k, g) in glyphs.iter().enumerate() {
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    put(out, x + 1 + k as i64 * 4 + col, y + 1 + row as i64, color);
                }
            }
        }
    }
}

/// Blends each item's mask with its category colour, then optionally
/// outlines masks and writes the category id (and score) above each box.
/// Output has the input's size and channel count; gray inputs get the
/// palette's luma.
pub fn render_overlay(img: &Raster, items: &[OverlayItem], style: &OverlayStyle) -> Result<Raster, RenderError> {
    style.validate()?;
    let mut out = img.clone();
    let (w, h) = (img.width(), img.height());
    for (index, item) in items.iter().enumerate() {
        if item.mask.width() != w || item.mask.height() != h {
            return Err(RenderError::Frame {
                index,
                mask_w: item.mask.width(),
                mask_h: item.mask.height(),
                img_w: w,
                img_h: h,
            });
        }
    }
    let c = img.channels() as usize;
    let a = style.alpha;
    for item in items {
        let color = shade(palette_color(item.category_id), img.channels());
        for (s, e) in item.mask.runs() {
            for i in s..e {
                let (x, y) = ((i / h as u64) as u32, (i % h as u64) as u32);
                for (v, &k) in out.pixel_mut(x, y).iter_mut().zip(&color[..c]) {
                    *v = ((1.0 - a) * *v as f64 + a * k as f64 + 0.5) as u8;
                }
            }
        }
    }
    if style.draw_contours {
        for item in items {
            let color = shade(palette_color(item.category_id), img.channels());
            let bits = item.mask.decode();
            for (s, e) in item.mask.runs() {
                for i in s..e {
                    let (x, y) = ((i / h as u64) as u32, (i % h as u64) as u32);
                    let outside = |dx: i64, dy: i64| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || !bits.get(nx as u32, ny as u32)
                    };
                    if outside(-1, 0) || outside(1, 0) || outside(0, -1) || outside(0, 1) {
                        put(&mut out, x as i64, y as i64, color);
                    }
                }
            }
        }
    }
    if style.draw_labels {
        for item in items.iter().filter(|i| !i.mask.is_empty()) {
            let [bx, by, _, _] = item.mask.bbox();
            let text = match item.score {
                Some(s) => format!("{} {:.2}", item.category_id, s),
                None => item.category_id.to_string(),
            };
            let color = shade(palette_color(item.category_id), img.channels());
            draw_text(&mut out, bx as i64, by as i64 - 8, &text, color);
        }
    }
    Ok(out)
}
