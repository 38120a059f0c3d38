//! Pixel-level primitives: the [`Raster`] container, geometric transforms,
//! Gaussian blur, mask-aware compositing and the RLE mask codec.
//!
//! Everything here is a pure function of its inputs.

mod blur;
mod composite;
mod rle;
mod transform;

use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

pub use blur::{gaussian_blur, gaussian_kernel};
pub use composite::{composite, composite_into, Paste};
pub use rle::{Bitmap, InstanceMask};
pub use transform::{affine_transform, transform_mask, AffineGeometry};

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("invalid raster dimensions {width}x{height}x{channels}")]
    InvalidDimensions {
        width: u32,
        height: u32,
        channels: u8,
    },
    #[error("raster data has {actual} samples, expected {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("malformed mask: {0}")]
    MalformedMask(String),
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),
    #[error("degenerate transform: mask vanishes at scale {scale} angle {angle}")]
    DegenerateTransform { scale: f64, angle: f64 },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Raster {
    /// A raster filled with `value` in every sample.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self> {
        check_dims(width, height, channels)?;
        let len = width as usize * height as usize * channels as usize;
        Ok(Self {
            width,
            height,
            channels,
            data: vec![value; len],
        })
    }

    pub fn from_raw(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, channels)?;
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(RasterError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a raster by evaluating `f(x, y)` for every pixel.
    pub fn from_fn<F>(width: u32, height: u32, channels: u8, mut f: F) -> Result<Self>
    where
        F: FnMut(u32, u32) -> [u8; 3],
    {
        check_dims(width, height, channels)?;
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend_from_slice(&px[..channels as usize]);
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels as usize]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let i = self.index(x, y);
        let c = self.channels as usize;
        &mut self.data[i..i + c]
    }

    /// Converts to the requested channel count. Gray is replicated into RGB;
    /// RGB collapses to Rec. 601 luma.
    pub fn to_channels(&self, channels: u8) -> Result<Raster> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        check_dims(self.width, self.height, channels)?;
        let data = match (self.channels, channels) {
            (1, 3) => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            (3, 1) => self
                .data
                .chunks_exact(3)
                .map(|p| {
                    let l = (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000;
                    l as u8
                })
                .collect(),
            _ => unreachable!("channels validated"),
        };
        Ok(Raster {
            width: self.width,
            height: self.height,
            channels,
            data,
        })
    }

    /// Mirrors the raster horizontally and/or vertically.
    pub fn flipped(&self, flip_h: bool, flip_v: bool) -> Raster {
        if !flip_h && !flip_v {
            return self.clone();
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let c = self.channels as usize;
        let stride = w * c;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            let sy = if flip_v { h - 1 - y } else { y };
            let row = &self.data[sy * stride..(sy + 1) * stride];
            if flip_h {
                for px in row.chunks_exact(c).rev() {
                    data.extend_from_slice(px);
                }
            } else {
                data.extend_from_slice(row);
            }
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    /// Bilinear resize (pixel-center aligned, edge-clamped).
    pub fn resized(&self, width: u32, height: u32) -> Result<Raster> {
        check_dims(width, height, self.channels)?;
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let c = self.channels as usize;
        let cols: Vec<Tap> = (0..width)
            .map(|x| Tap::new((x as f64 + 0.5) * sx - 0.5, self.width))
            .collect();
        let mut data = Vec::with_capacity(width as usize * height as usize * c);
        for y in 0..height {
            let ty = Tap::new((y as f64 + 0.5) * sy - 0.5, self.height);
            for tx in &cols {
                for ch in 0..c {
                    data.push(self.blend(tx, &ty, ch));
                }
            }
        }
        Raster::from_raw(width, height, self.channels, data)
    }

    #[inline]
    fn blend(&self, tx: &Tap, ty: &Tap, ch: usize) -> u8 {
        let at = |x: u32, y: u32| self.data[self.index(x, y) + ch] as f64;
        let top = at(tx.lo, ty.lo) * (1.0 - tx.t) + at(tx.hi, ty.lo) * tx.t;
        let bottom = at(tx.lo, ty.hi) * (1.0 - tx.t) + at(tx.hi, ty.hi) * tx.t;
        let v = top * (1.0 - ty.t) + bottom * ty.t;
        to_u8(v)
    }

    /// Samples every channel at continuous index coordinates (pixel centers
    /// at integers) into `out`, clamping neighbours to the border.
    pub(crate) fn sample_bilinear_into(&self, fx: f64, fy: f64, out: &mut [u8]) {
        let (tx, ty) = (Tap::new(fx, self.width), Tap::new(fy, self.height));
        for (ch, slot) in out.iter_mut().enumerate() {
            *slot = self.blend(&tx, &ty, ch);
        }
    }

    pub fn mean(&self) -> f64 {
        let sum: u64 = self.data.iter().map(|&v| v as u64).sum();
        sum as f64 / self.data.len() as f64
    }

    /// Reads an 8-bit PNG. Gray+alpha and RGBA are reduced to gray and RGB.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })?;
        let (width, height) = (img.width(), img.height());
        match img {
            DynamicImage::ImageLuma8(buf) => Raster::from_raw(width, height, 1, buf.into_raw()),
            DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                Raster::from_raw(width, height, 1, img.to_luma8().into_raw())
            }
            other => Raster::from_raw(width, height, 3, other.to_rgb8().into_raw()),
        }
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| RasterError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let encoder = PngEncoder::new_with_quality(
            BufWriter::new(file),
            CompressionType::Fast,
            FilterType::Paeth,
        );
        let color = if self.channels == 1 {
            ExtendedColorType::L8
        } else {
            ExtendedColorType::Rgb8
        };
        encoder
            .write_image(&self.data, self.width, self.height, color)
            .map_err(|source| RasterError::Image {
                path: path.display().to_string(),
                source,
            })
    }
}

/// Rounds half away from zero and saturates. Inputs are never negative, so
/// `v + 0.5` truncated matches `round`, without the libm call.
#[inline]
pub(crate) fn to_u8(v: f64) -> u8 {
    (v + 0.5) as u8
}

/// Neighbour pair and weight along one axis for bilinear sampling.
struct Tap {
    lo: u32,
    hi: u32,
    t: f64,
}

impl Tap {
    #[inline]
    fn new(f: f64, len: u32) -> Tap {
        let f = f.clamp(0.0, (len - 1) as f64);
        // f >= 0, so truncation is floor.
        let lo = f as u32;
        let t = f - lo as f64;
        Tap {
            lo,
            hi: (lo + 1).min(len - 1),
            t,
        }
    }
}

fn check_dims(width: u32, height: u32, channels: u8) -> Result<()> {
    if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
        return Err(RasterError::InvalidDimensions {
            width,
            height,
            channels,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_size_and_bad_channels() {
        assert!(Raster::filled(0, 3, 1, 0).is_err());
        assert!(Raster::filled(3, 3, 2, 0).is_err());
        assert!(Raster::from_raw(2, 2, 1, vec![0; 3]).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let r = Raster::from_fn(5, 3, 3, |x, y| [x as u8, y as u8, (x * y) as u8]).unwrap();
        assert_eq!(r.flipped(true, true).flipped(true, true), r);
        assert_eq!(r.flipped(true, false).pixel(0, 1), r.pixel(4, 1));
        assert_eq!(r.flipped(false, true).pixel(2, 0), r.pixel(2, 2));
    }

    #[test]
    fn png_round_trip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        for ch in [1u8, 3] {
            let r = Raster::from_fn(7, 4, ch, |x, y| [(x * 30) as u8, (y * 60) as u8, 9]).unwrap();
            let p = dir.path().join(format!("r{ch}.png"));
            r.write_png(&p).unwrap();
            assert_eq!(Raster::read_png(&p).unwrap(), r);
        }
    }

    #[test]
    fn channel_conversion() {
        let g = Raster::from_fn(2, 2, 1, |x, _| [x as u8 * 100, 0, 0]).unwrap();
        let rgb = g.to_channels(3).unwrap();
        assert_eq!(rgb.pixel(1, 0), &[100, 100, 100]);
        assert_eq!(rgb.to_channels(1).unwrap(), g);
    }
}
