use super::{InstanceMask, Raster, RasterError, Result};

/// Outcome of pasting a foreground onto a base.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paste {
    /// `pixels` base pixels were overwritten.
    Placed { pixels: u64 },
    /// No set mask pixel landed inside the base.
    FullyTruncated,
}

impl Paste {
    pub fn pixels(self) -> u64 {
        match self {
            Paste::Placed { pixels } => pixels,
            Paste::FullyTruncated => 0,
        }
    }
}

/// Hard-pastes `fg` onto `base` at `offset` wherever `fg_mask` is set.
/// Offsets may be negative or run past the base; out-of-bounds pixels are
/// truncated. A foreground whose channel count differs from the base is
/// converted first.
pub fn composite(
    base: &Raster,
    fg: &Raster,
    fg_mask: &InstanceMask,
    offset: (i64, i64),
) -> Result<(Raster, Paste)> {
    let mut out = base.clone();
    let paste = composite_into(&mut out, fg, fg_mask, offset)?;
    Ok((out, paste))
}

/// In-place form of [`composite`].
pub fn composite_into(
    base: &mut Raster,
    fg: &Raster,
    fg_mask: &InstanceMask,
    offset: (i64, i64),
) -> Result<Paste> {
    if fg_mask.width() != fg.width() || fg_mask.height() != fg.height() {
        return Err(RasterError::FrameMismatch(format!(
            "foreground {}x{} vs mask {}x{}",
            fg.width(),
            fg.height(),
            fg_mask.width(),
            fg_mask.height()
        )));
    }
    let converted;
    let fg = if fg.channels() != base.channels() {
        converted = fg.to_channels(base.channels())?;
        &converted
    } else {
        fg
    };
    // Mask re-expressed in base coordinates; clipping happens here.
    let placed = fg_mask.reframe(base.height(), base.width(), offset.0, offset.1);
    if placed.is_empty() {
        return Ok(Paste::FullyTruncated);
    }
    let bh = base.height() as u64;
    let c = base.channels() as usize;
    for (s, e) in placed.runs() {
        for i in s..e {
            let (x, y) = ((i / bh) as u32, (i % bh) as u32);
            let sx = (x as i64 - offset.0) as u32;
            let sy = (y as i64 - offset.1) as u32;
            let si = fg.index(sx, sy);
            let di = base.index(x, y);
            base.data_mut()[di..di + c].copy_from_slice(&fg.data()[si..si + c]);
        }
    }
    Ok(Paste::Placed {
        pixels: placed.area(),
    })
}
