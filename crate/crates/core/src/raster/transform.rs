use super::{Bitmap, InstanceMask, Raster, RasterError, Result};

/// Flip, rotate and scale about the source center, with the output canvas
/// grown to the bounding box of the transformed source rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineGeometry {
    src_w: u32,
    src_h: u32,
    flip_h: bool,
    flip_v: bool,
    cos: f64,
    sin: f64,
    scale: f64,
    out_w: u32,
    out_h: u32,
}

// Snaps cos/sin of right angles to exact integers so 90° turns permute pixels.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 {
        r
    } else {
        v
    }
}

impl AffineGeometry {
    pub fn new(src_w: u32, src_h: u32, flip_h: bool, flip_v: bool, angle_deg: f64, scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
        let rad = angle_deg.to_radians();
        let (cos, sin) = (snap(rad.cos()), snap(rad.sin()));
        let span_w = scale * (cos.abs() * src_w as f64 + sin.abs() * src_h as f64);
        let span_h = scale * (sin.abs() * src_w as f64 + cos.abs() * src_h as f64);
        let out_w = ((span_w - 1e-9).ceil() as u32).max(1);
        let out_h = ((span_h - 1e-9).ceil() as u32).max(1);
        Self {
            src_w,
            src_h,
            flip_h,
            flip_v,
            cos,
            sin,
            scale,
            out_w,
            out_h,
        }
    }

    /// Output canvas size `(width, height)`.
    pub fn output_size(&self) -> (u32, u32) {
        (self.out_w, self.out_h)
    }

    /// Maps the center of output pixel `(u, v)` to continuous source
    /// coordinates (source pixel `(x, y)` spans `[x, x+1) × [y, y+1)`).
    #[inline]
    pub fn source_point(&self, u: u32, v: u32) -> (f64, f64) {
        let qx = (u as f64 + 0.5 - self.out_w as f64 / 2.0) / self.scale;
        let qy = (v as f64 + 0.5 - self.out_h as f64 / 2.0) / self.scale;
        // inverse rotation
        let mut px = self.cos * qx + self.sin * qy;
        let mut py = -self.sin * qx + self.cos * qy;
        if self.flip_h {
            px = -px;
        }
        if self.flip_v {
            py = -py;
        }
        (px + self.src_w as f64 / 2.0, py + self.src_h as f64 / 2.0)
    }

    #[inline]
    fn source_pixel(&self, sx: f64, sy: f64) -> Option<(u32, u32)> {
        if sx < 0.0 || sy < 0.0 || sx >= self.src_w as f64 || sy >= self.src_h as f64 {
            return None;
        }
        Some((sx as u32, sy as u32))
    }

    fn warp_mask(&self, src: &Bitmap) -> Bitmap {
        let mut out = Bitmap::new(self.out_w, self.out_h);
        for v in 0..self.out_h {
            for u in 0..self.out_w {
                let (sx, sy) = self.source_point(u, v);
                if let Some((x, y)) = self.source_pixel(sx, sy) {
                    if src.get(x, y) {
                        out.set(u, v, true);
                    }
                }
            }
        }
        out
    }

    fn warp_image(&self, src: &Raster) -> Raster {
        let mut out = Raster::filled(self.out_w, self.out_h, src.channels(), 0).expect("non-empty output");
        for v in 0..self.out_h {
            for u in 0..self.out_w {
                let (sx, sy) = self.source_point(u, v);
                if self.source_pixel(sx, sy).is_none() {
                    continue;
                }
                src.sample_bilinear_into(sx - 0.5, sy - 0.5, out.pixel_mut(u, v));
            }
        }
        out
    }
}

/// Transforms a mask alone (nearest-neighbour), failing if nothing survives.
pub fn transform_mask(
    mask: &InstanceMask,
    flip_h: bool,
    flip_v: bool,
    angle: f64,
    scale: f64,
) -> Result<InstanceMask> {
    let geo = AffineGeometry::new(mask.width(), mask.height(), flip_h, flip_v, angle, scale);
    let out = InstanceMask::encode(&geo.warp_mask(&mask.decode()));
    if out.is_empty() {
        return Err(RasterError::DegenerateTransform { scale, angle });
    }
    Ok(out)
}

/// Applies flips, rotation (degrees) and scaling to an individual and its
/// mask. The image is resampled bilinearly and the mask nearest-neighbour,
/// so the mask stays binary.
pub fn affine_transform(
    img: &Raster,
    mask: &InstanceMask,
    flip_h: bool,
    flip_v: bool,
    angle: f64,
    scale: f64,
) -> Result<(Raster, InstanceMask)> {
    if mask.width() != img.width() || mask.height() != img.height() {
        return Err(RasterError::FrameMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width(),
            img.height(),
            mask.width(),
            mask.height()
        )));
    }
    let geo = AffineGeometry::new(img.width(), img.height(), flip_h, flip_v, angle, scale);
    let out_mask = InstanceMask::encode(&geo.warp_mask(&mask.decode()));
    if out_mask.is_empty() {
        return Err(RasterError::DegenerateTransform { scale, angle });
    }
    Ok((geo.warp_image(img), out_mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32) -> Raster {
        Raster::from_fn(w, h, 3, |x, y| [(x * 7 + y) as u8, (y * 11) as u8, (x ^ y) as u8]).unwrap()
    }

    fn blob(w: u32, h: u32) -> InstanceMask {
        InstanceMask::encode(&Bitmap::from_fn(w, h, |x, y| (x + 2 * y) % 5 != 0 && x > 0))
    }

    #[test]
    fn identity_is_pixel_exact() {
        let img = textured(13, 9);
        let m = blob(13, 9);
        let (out, om) = affine_transform(&img, &m, false, false, 0.0, 1.0).unwrap();
        assert_eq!(out, img);
        assert_eq!(om, m);
    }

    #[test]
    fn right_angle_rotation_permutes_pixels() {
        let img = textured(13, 9);
        let m = blob(13, 9);
        let (out, om) = affine_transform(&img, &m, false, false, 90.0, 1.0).unwrap();
        assert_eq!((out.width(), out.height()), (9, 13));
        assert_eq!(om.area(), m.area());
        let mut a: Vec<_> = img.data().chunks(3).map(|p| p.to_vec()).collect();
        let mut b: Vec<_> = out.data().chunks(3).map(|p| p.to_vec()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn flips_are_involutions() {
        let img = textured(8, 5);
        let m = blob(8, 5);
        for (fh, fv) in [(true, false), (false, true), (true, true)] {
            let (i1, m1) = affine_transform(&img, &m, fh, fv, 0.0, 1.0).unwrap();
            let (i2, m2) = affine_transform(&i1, &m1, fh, fv, 0.0, 1.0).unwrap();
            assert_eq!(i2, img);
            assert_eq!(m2, m);
        }
        let (i1, _) = affine_transform(&img, &m, true, false, 0.0, 1.0).unwrap();
        assert_eq!(i1, img.flipped(true, false));
    }

    // Exact rasterization of a rotated square: a pixel is inside when its
    // center passes the point-in-convex-polygon test.
    fn rotated_square_area(side: f64, angle_deg: f64) -> u64 {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let half = side / 2.0;
        let corners: Vec<(f64, f64)> = [(-half, -half), (half, -half), (half, half), (-half, half)]
            .iter()
            .map(|&(x, y)| (c * x - s * y, s * x + c * y))
            .collect();
        let extent = (side * (c.abs() + s.abs()) / 2.0).ceil() as i64 + 2;
        let mut n = 0;
        for py in -extent..extent {
            for px in -extent..extent {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let inside = (0..4).all(|i| {
                    let (ax, ay) = corners[i];
                    let (bx, by) = corners[(i + 1) % 4];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                });
                n += inside as u64;
            }
        }
        n
    }

    #[test]
    fn rotated_square_area_close_to_exact() {
        let m = InstanceMask::encode(&Bitmap::from_fn(100, 100, |_, _| true));
        let out = transform_mask(&m, false, false, 30.0, 1.0).unwrap();
        let exact = rotated_square_area(100.0, 30.0) as f64;
        assert!((exact - 10_000.0).abs() / 10_000.0 < 0.02, "oracle {exact}");
        let rel = (out.area() as f64 - 10_000.0).abs() / 10_000.0;
        assert!(rel < 0.02, "area {} vs exact {}", out.area(), exact);
        assert!((out.area() as f64 - exact).abs() / exact < 0.02);
    }

    #[test]
    fn scale_changes_canvas() {
        let m = InstanceMask::encode(&Bitmap::from_fn(10, 20, |_, _| true));
        let geo = AffineGeometry::new(10, 20, false, false, 0.0, 1.5);
        assert_eq!(geo.output_size(), (15, 30));
        assert_eq!(transform_mask(&m, false, false, 0.0, 1.5).unwrap().area(), 450);
    }

    #[test]
    fn vanishing_mask_is_degenerate() {
        let m = InstanceMask::encode(&Bitmap::from_fn(40, 40, |x, y| x == 3 && y == 3));
        let err = transform_mask(&m, false, false, 0.0, 0.01).unwrap_err();
        assert!(matches!(err, RasterError::DegenerateTransform { .. }));
    }

    #[test]
    fn frame_mismatch_rejected() {
        let img = textured(4, 4);
        let m = blob(5, 4);
        assert!(matches!(
            affine_transform(&img, &m, false, false, 0.0, 1.0),
            Err(RasterError::FrameMismatch(_))
        ));
    }
}
