use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_TRIMAP_KERNEL: usize = 11;
pub const FG_THRESHOLD: f64 = 0.999;
pub const BG_THRESHOLD: f64 = 0.001;

/// Erosion of a binary mask by a `k x k` square. Pixels outside the image
/// do not constrain the result.
pub fn erode(mask: &Array2<bool>, k: usize) -> Array2<bool> {
    let r = k / 2;
    let (h, w) = mask.dim();
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[[y, x]] = (lo..=hi).all(|xx| mask[[y, xx]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).all(|yy| rows[[yy, x]]);
        }
    }
    out
}

/// Trimap with values 0 (background), 0.5 (unknown) and 1 (foreground).
pub fn make_trimap(alpha: &Array2<f64>, kernel: usize) -> Result<Array2<f64>> {
    let (h, w) = alpha.dim();
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "trimap kernel must be odd, got {kernel}"
        )));
    }
    if kernel > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "trimap kernel {kernel} is larger than the {h}x{w} image"
        )));
    }
    if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument(
            "alpha values must lie in [0, 1]".into(),
        ));
    }
    let fg = erode(&alpha.mapv(|a| a >= FG_THRESHOLD), kernel);
    let bg = erode(&alpha.mapv(|a| a <= BG_THRESHOLD), kernel);
    Ok(Array2::from_shape_fn((h, w), |p| {
        if fg[p] {
            1.0
        } else if bg[p] {
            0.0
        } else {
            0.5
        }
    }))
}

pub fn unknown_mask(trimap: &Array2<f64>) -> Array2<bool> {
    trimap.mapv(|t| t == 0.5)
}
