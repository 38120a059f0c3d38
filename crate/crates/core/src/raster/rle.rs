use super::{RasterError, Result};

/// Binary grid, row-major, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<u8>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width >= 1 && height >= 1, "bitmap must be at least 1x1");
        Self {
            width,
            height,
            bits: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut b = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    b.set(x, y, true);
                }
            }
        }
        b
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = on as u8;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }

    /// Row-major 0/1 bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }
}

/// Binary instance mask stored as column-major run-length counts.
///
/// The first count is always a zero-run (possibly of length 0); every later
/// count is strictly positive. `bbox` is `[x, y, w, h]` and is `[0, 0, 0, 0]`
/// for an empty mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
    bbox: [u32; 4],
    area: u64,
}

impl InstanceMask {
    /// Encodes a bitmap, scanning columns left to right and rows top to bottom.
    pub fn encode(bitmap: &Bitmap) -> Self {
        let (w, h) = (bitmap.width, bitmap.height);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = bitmap.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self::from_canonical(h, w, counts)
    }

    /// Validates raw counts as produced by [`InstanceMask::counts`].
    pub fn from_counts(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(RasterError::MalformedMask(format!(
                "frame {height}x{width} is empty"
            )));
        }
        if counts.is_empty() {
            return Err(RasterError::MalformedMask("no runs".into()));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(RasterError::MalformedMask(format!(
                "runs sum to {total}, frame {height}x{width} needs {expected}"
            )));
        }
        if let Some(i) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(RasterError::MalformedMask(format!(
                "zero-length run at position {}",
                i + 1
            )));
        }
        Ok(Self::from_canonical(height, width, counts))
    }

    fn from_canonical(height: u32, width: u32, counts: Vec<u32>) -> Self {
        let mut m = Self {
            height,
            width,
            counts,
            bbox: [0; 4],
            area: 0,
        };
        m.area = m.runs().map(|(s, e)| e - s).sum();
        m.bbox = m.compute_bbox();
        m
    }

    pub fn empty(height: u32, width: u32) -> Self {
        Self::from_canonical(height, width, vec![height * width])
    }

    /// Builds a mask from column-major linear intervals `[start, end)`.
    /// Intervals must be sorted by start; overlapping or touching intervals
    /// are coalesced.
    pub fn from_runs(height: u32, width: u32, runs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let n = height as u64 * width as u64;
        let mut counts = Vec::new();
        let mut cursor = 0u64;
        let mut open: Option<(u64, u64)> = None;
        let flush = |(s, e): (u64, u64), cursor: &mut u64, counts: &mut Vec<u32>| {
            counts.push((s - *cursor) as u32);
            counts.push((e - s) as u32);
            *cursor = e;
        };
        for (s, e) in runs {
            debug_assert!(e <= n);
            if s >= e {
                continue;
            }
            match open {
                Some((os, oe)) if s <= oe => {
                    debug_assert!(s >= os, "runs must be sorted");
                    open = Some((os, oe.max(e)));
                }
                Some(prev) => {
                    flush(prev, &mut cursor, &mut counts);
                    open = Some((s, e));
                }
                None => open = Some((s, e)),
            }
        }
        if let Some(prev) = open {
            flush(prev, &mut cursor, &mut counts);
        }
        if cursor < n || counts.is_empty() {
            counts.push((n - cursor) as u32);
        }
        Self::from_canonical(height, width, counts)
    }

    pub fn decode(&self) -> Bitmap {
        let mut b = Bitmap::new(self.width, self.height);
        let h = self.height as u64;
        for (s, e) in self.runs() {
            for i in s..e {
                b.set((i / h) as u32, (i % h) as u32, true);
            }
        }
        b
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Tight `[x, y, w, h]` box over set pixels.
    pub fn bbox(&self) -> [u32; 4] {
        self.bbox
    }

    pub fn area(&self) -> u64 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn same_frame(&self, other: &InstanceMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Set intervals `[start, end)` in column-major linear index space.
    pub fn runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = x as u64 * self.height as u64 + y as u64;
        self.runs().any(|(s, e)| s <= idx && idx < e)
    }

    fn compute_bbox(&self) -> [u32; 4] {
        let h = self.height as u64;
        let (mut x0, mut y0, mut x1, mut y1) = (u64::MAX, u64::MAX, 0u64, 0u64);
        let mut any = false;
        for (s, e) in self.runs() {
            any = true;
            let (cs, ce) = (s / h, (e - 1) / h);
            let (rs, re) = if cs == ce { (s % h, (e - 1) % h) } else { (0, h - 1) };
            x0 = x0.min(cs);
            x1 = x1.max(ce);
            y0 = y0.min(rs);
            y1 = y1.max(re);
        }
        if !any {
            return [0; 4];
        }
        [x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32]
    }

    fn check_frame(&self, other: &InstanceMask) -> Result<()> {
        if !self.same_frame(other) {
            return Err(RasterError::FrameMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// `|self ∩ other|`, computed on runs without decoding.
    pub fn intersection_area(&self, other: &InstanceMask) -> Result<u64> {
        self.check_frame(other)?;
        let a: Vec<_> = self.runs().collect();
        let b: Vec<_> = other.runs().collect();
        let (mut i, mut j, mut acc) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                acc += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(acc)
    }

    pub fn union(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.check_frame(other)?;
        let mut all: Vec<_> = self.runs().chain(other.runs()).collect();
        all.sort_unstable();
        Ok(InstanceMask::from_runs(self.height, self.width, all))
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &InstanceMask) -> Result<InstanceMask> {
        self.check_frame(other)?;
        let b: Vec<_> = other.runs().collect();
        let mut out = Vec::new();
        let mut j = 0;
        for (mut s, e) in self.runs() {
            while j < b.len() && b[j].1 <= s {
                j += 1;
            }
            let mut k = j;
            while k < b.len() && b[k].0 < e {
                if b[k].0 > s {
                    out.push((s, b[k].0));
                }
                s = s.max(b[k].1);
                k += 1;
            }
            if s < e {
                out.push((s, e));
            }
        }
        Ok(InstanceMask::from_runs(self.height, self.width, out))
    }

    /// Moves the mask into a `height`×`width` frame with its origin at
    /// `(dx, dy)`; pixels landing outside the new frame are dropped. Cropping
    /// a window at `(x, y)` is `reframe(h, w, -x, -y)`.
    pub fn reframe(&self, height: u32, width: u32, dx: i64, dy: i64) -> InstanceMask {
        let h = self.height as u64;
        let (nh, nw) = (height as i64, width as i64);
        let mut out = Vec::new();
        for (s, e) in self.runs() {
            let mut i = s;
            while i < e {
                let col = i / h;
                let row = i % h;
                let col_end = ((col + 1) * h).min(e);
                let last_row = row + (col_end - i) - 1;
                i = col_end;
                let gc = col as i64 + dx;
                if gc < 0 || gc >= nw {
                    continue;
                }
                let r0 = (row as i64 + dy).max(0);
                let r1 = (last_row as i64 + dy).min(nh - 1);
                if r0 > r1 {
                    continue;
                }
                let base = gc as u64 * height as u64;
                out.push((base + r0 as u64, base + r1 as u64 + 1));
            }
        }
        InstanceMask::from_runs(height, width, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: &[&str]) -> Bitmap {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        Bitmap::from_fn(w, h, |x, y| rows[y as usize].as_bytes()[x as usize] == b'#')
    }

    #[test]
    fn all_zero_and_all_one() {
        assert_eq!(InstanceMask::encode(&grid(&["..", ".."])).counts(), &[4]);
        assert_eq!(InstanceMask::encode(&grid(&["##", "##"])).counts(), &[0, 4]);
    }

    #[test]
    fn column_major_example() {
        // 3 rows x 2 columns, (r0,c0) and (r2,c1) set.
        let m = InstanceMask::encode(&grid(&["#.", "..", ".#"]));
        assert_eq!(m.counts(), &[0, 1, 4, 1]);
        assert_eq!(m.area(), 2);
        assert_eq!(m.bbox(), [0, 0, 2, 3]);
    }

    #[test]
    fn malformed_counts_rejected() {
        assert!(matches!(
            InstanceMask::from_counts(2, 2, vec![1, 2]),
            Err(RasterError::MalformedMask(_))
        ));
        assert!(InstanceMask::from_counts(2, 2, vec![1, 2, 2]).is_err());
        assert!(InstanceMask::from_counts(2, 2, vec![2, 0, 2]).is_err());
        assert!(InstanceMask::from_counts(2, 2, vec![]).is_err());
        assert!(InstanceMask::from_counts(2, 2, vec![0, 4]).is_ok());
    }

    #[test]
    fn bbox_of_run_crossing_columns() {
        // 4 rows x 3 cols; the run covers row 3 of col 0 and row 0 of col 1.
        let m = InstanceMask::from_counts(4, 3, vec![3, 2, 7]).unwrap();
        assert_eq!(m.bbox(), [0, 0, 2, 4]);
        assert_eq!(m.decode(), grid(&[".#.", "...", "...", "#.."]));
    }

    #[test]
    fn reframe_translates_and_clips() {
        let m = InstanceMask::encode(&Bitmap::from_fn(4, 4, |_, _| true));
        let moved = m.reframe(10, 10, 8, -1);
        assert_eq!(moved.area(), 2 * 3);
        assert_eq!(moved.bbox(), [8, 0, 2, 3]);
        let back = moved.reframe(4, 4, -8, 1);
        assert_eq!(back.area(), 6);
    }

    fn arb_bitmap() -> impl Strategy<Value = Bitmap> {
        (1u32..=64, 1u32..=64, any::<u64>(), 0.0f64..1.0).prop_map(|(w, h, seed, p)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Bitmap::from_fn(w, h, |_, _| rng.gen_bool(p))
        })
    }

    fn arb_pair() -> impl Strategy<Value = (Bitmap, Bitmap)> {
        (1u32..=24, 1u32..=24, any::<u64>()).prop_map(|(w, h, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Bitmap::from_fn(w, h, |_, _| rng.gen_bool(0.4));
            let b = Bitmap::from_fn(w, h, |_, _| rng.gen_bool(0.4));
            (a, b)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn round_trip_and_coherent_fields(b in arb_bitmap()) {
            let m = InstanceMask::encode(&b);
            prop_assert_eq!(m.decode(), b.clone());
            prop_assert_eq!(m.area(), b.count());
            let again = InstanceMask::from_counts(m.height(), m.width(), m.counts().to_vec()).unwrap();
            prop_assert_eq!(&again, &m);
            // bbox recomputed by brute force
            let mut bb = None::<(u32, u32, u32, u32)>;
            for y in 0..b.height() { for x in 0..b.width() { if b.get(x, y) {
                bb = Some(match bb { None => (x, y, x, y), Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)) });
            }}}
            let expect = bb.map(|(x0, y0, x1, y1)| [x0, y0, x1 - x0 + 1, y1 - y0 + 1]).unwrap_or([0; 4]);
            prop_assert_eq!(m.bbox(), expect);
        }

        #[test]
        fn set_ops_match_pixelwise((a, b) in arb_pair()) {
            let (ma, mb) = (InstanceMask::encode(&a), InstanceMask::encode(&b));
            let inter = Bitmap::from_fn(a.width(), a.height(), |x, y| a.get(x, y) && b.get(x, y));
            let uni = Bitmap::from_fn(a.width(), a.height(), |x, y| a.get(x, y) || b.get(x, y));
            let diff = Bitmap::from_fn(a.width(), a.height(), |x, y| a.get(x, y) && !b.get(x, y));
            prop_assert_eq!(ma.intersection_area(&mb).unwrap(), inter.count());
            prop_assert_eq!(ma.union(&mb).unwrap().decode(), uni);
            prop_assert_eq!(ma.difference(&mb).unwrap().decode(), diff);
        }

        #[test]
        fn reframe_matches_pixel_shift(b in arb_bitmap(), dx in -70i64..70, dy in -70i64..70, nw in 1u32..80, nh in 1u32..80) {
            let m = InstanceMask::encode(&b).reframe(nh, nw, dx, dy);
            let expect = Bitmap::from_fn(nw, nh, |x, y| {
                let sx = x as i64 - dx;
                let sy = y as i64 - dy;
                sx >= 0 && sy >= 0 && (sx as u32) < b.width() && (sy as u32) < b.height() && b.get(sx as u32, sy as u32)
            });
            prop_assert_eq!(m.decode(), expect);
        }
    }
}
