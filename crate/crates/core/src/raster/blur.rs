use super::Raster;

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "kernel needs sigma > 0");
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

// Half-sample symmetric reflection (`c b a | a b c | c b a`), valid for any offset.
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

// dst += k * src, elementwise.
#[inline]
fn axpy(dst: &mut [f32], k: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

#[inline]
fn axpy_u8(dst: &mut [f32], k: f32, src: &[u8]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s as f32;
    }
}

/// One image row filtered along x. `padded` is scratch of `(w + 2r) * c`.
fn horizontal(src: &[f32], padded: &mut [f32], kernel: &[f32], c: usize, dst: &mut [f32]) {
    let r = kernel.len() / 2;
    let w = src.len() / c;
    for (p, slot) in padded.chunks_exact_mut(c).enumerate() {
        let sx = reflect(p as i64 - r as i64, w as i64);
        slot.copy_from_slice(&src[sx * c..(sx + 1) * c]);
    }
    dst.fill(0.0);
    for (t, &kv) in kernel.iter().enumerate() {
        axpy(dst, kv, &padded[t * c..t * c + dst.len()]);
    }
}

// Works a row at a time so every intermediate stays in cache. Rows-first
// keeps a ring of the 2r+1 x-filtered rows the current output row needs.
fn blur_ordered(img: &Raster, sigma: f64, rows_first: bool) -> Raster {
    if sigma == 0.0 {
        return img.clone();
    }
    let kernel: Vec<f32> = gaussian_kernel(sigma).iter().map(|&k| k as f32).collect();
    let (w, h, c) = (img.width() as usize, img.height() as usize, img.channels() as usize);
    let r = kernel.len() / 2;
    let stride = w * c;
    let src_row = |y: usize| &img.data()[y * stride..(y + 1) * stride];
    let mut padded = vec![0.0f32; (w + 2 * r) * c];
    let mut row_f = vec![0.0f32; stride];
    let mut acc = vec![0.0f32; stride];
    let mut data = Vec::with_capacity(h * stride);
    if rows_first {
        let taps = kernel.len();
        let mut ring = vec![0.0f32; taps * stride];
        // Virtual row v (may lie outside 0..h) lives in slot v mod taps.
        let mut fill = |v: i64, ring: &mut [f32]| {
            let sy = reflect(v, h as i64);
            for (d, &s) in row_f.iter_mut().zip(src_row(sy)) {
                *d = s as f32;
            }
            let slot = v.rem_euclid(taps as i64) as usize;
            horizontal(&row_f, &mut padded, &kernel, c, &mut ring[slot * stride..(slot + 1) * stride]);
        };
        for v in -(r as i64)..r as i64 {
            fill(v, &mut ring);
        }
        for y in 0..h as i64 {
            fill(y + r as i64, &mut ring);
            acc.fill(0.0);
            for (t, &kv) in kernel.iter().enumerate() {
                let slot = (y + t as i64 - r as i64).rem_euclid(taps as i64) as usize;
                axpy(&mut acc, kv, &ring[slot * stride..(slot + 1) * stride]);
            }
            data.extend(acc.iter().map(|&v| (v + 0.5) as u8));
        }
    } else {
        for y in 0..h {
            row_f.fill(0.0);
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as i64 + t as i64 - r as i64, h as i64);
                axpy_u8(&mut row_f, kv, src_row(sy));
            }
            horizontal(&row_f, &mut padded, &kernel, c, &mut acc);
            data.extend(acc.iter().map(|&v| (v + 0.5) as u8));
        }
    }
    Raster::from_raw(img.width(), img.height(), img.channels(), data).expect("same shape")
}

/// Separable Gaussian blur with reflect padding. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be >= 0");
    blur_ordered(img, sigma, true)
}
