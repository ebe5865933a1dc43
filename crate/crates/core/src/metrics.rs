//! Matting error metrics over the unknown region of a trimap.
//!
//! SAD, Grad and Conn are raw sums divided by 1000, the usual reporting scale
//! of matting benchmarks. MSE is a plain mean.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCALE: f64 = 1000.0;
pub const DEFAULT_GRAD_SIGMA: f64 = 1.4;
pub const DEFAULT_CONN_STEP: f64 = 0.1;
const CONN_MIN_DIFF: f64 = 0.15;

fn unknown_pixels(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    trimap: &Array2<f64>,
) -> Result<Vec<(usize, usize)>> {
    if pred.dim() != gt.dim() || pred.dim() != trimap.dim() {
        return Err(Error::Shape(format!(
            "pred {:?}, gt {:?} and trimap {:?} differ",
            pred.dim(),
            gt.dim(),
            trimap.dim()
        )));
    }
    let px: Vec<_> = trimap
        .indexed_iter()
        .filter(|(_, t)| **t == 0.5)
        .map(|(p, _)| p)
        .collect();
    if px.is_empty() {
        return Err(Error::EmptyRegion("trimap has no unknown pixels".into()));
    }
    Ok(px)
}

pub fn mse_unknown(pred: &Array2<f64>, gt: &Array2<f64>, trimap: &Array2<f64>) -> Result<f64> {
    let px = unknown_pixels(pred, gt, trimap)?;
    Ok(px.iter().map(|&p| (pred[p] - gt[p]).powi(2)).sum::<f64>() / px.len() as f64)
}

pub fn sad_unknown(pred: &Array2<f64>, gt: &Array2<f64>, trimap: &Array2<f64>) -> Result<f64> {
    let px = unknown_pixels(pred, gt, trimap)?;
    Ok(px.iter().map(|&p| (pred[p] - gt[p]).abs()).sum::<f64>() / REPORT_SCALE)
}

/// Symmetric reflection of `i` into `0..n` (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// 1D Gaussian and its derivative, truncated at `ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let r = (3.0 * sigma).ceil() as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|x| {
            (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let dg: Vec<f64> = (-r..=r)
        .zip(&g)
        .map(|(x, gv)| -(x as f64) * gv / (sigma * sigma))
        .collect();
    (g, dg)
}

/// Correlates rows with `row_taps` and columns with `col_taps`.
fn separable(img: &Array2<f64>, row_taps: &[f64], col_taps: &[f64], scale: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (row_taps.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = row_taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * img[[y, reflect(x as isize + k as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = scale
                * col_taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[[reflect(y as isize + k as isize - r, h), x]])
                    .sum::<f64>();
        }
    }
    out
}

/// Gradient magnitude under Gaussian-derivative filters with unit L2 norm.
pub fn gradient_magnitude(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let (g, dg) = gaussian_taps(sigma);
    let norm =
        dg.iter().map(|v| v * v).sum::<f64>().sqrt() * g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gx = separable(img, &dg, &g, 1.0 / norm);
    let gy = separable(img, &g, &dg, 1.0 / norm);
    let mut m = gx;
    m.zip_mut_with(&gy, |a, b| *a = (*a * *a + b * b).sqrt());
    m
}

pub fn grad_error(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    trimap: &Array2<f64>,
    sigma: f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let px = unknown_pixels(pred, gt, trimap)?;
    let mp = gradient_magnitude(pred, sigma);
    let mg = gradient_magnitude(gt, sigma);
    Ok(px.iter().map(|&p| (mp[p] - mg[p]).powi(2)).sum::<f64>() / REPORT_SCALE)
}

/// Largest 4-connected component of `mask`; ties go to the component found
/// first in row-major order.
pub fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut best = (0usize, 0usize);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in mask.indexed_iter().filter(|(_, m)| **m).map(|(p, _)| p) {
        if label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some((y, x)) = queue.pop_front() {
            size += 1;
            let nbrs = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for q in nbrs {
                if q.0 < h && q.1 < w && mask[q] && label[q] == 0 {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.mapv(|l| l != 0 && l == best.0)
}

/// Connectivity error. For each threshold `theta = step, 2 step, ..., 0.9`
/// the source region is the largest 4-connected component of
/// `pred >= theta && gt >= theta`; a pixel's level is the last threshold
/// before it left the source (1 if it never did). Differences from that
/// level below 0.15 count as fully connected. When the first source region is
/// empty the metric falls back to SAD.
pub fn conn_error(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    trimap: &Array2<f64>,
    step: f64,
) -> Result<f64> {
    let k = (0.9 / step).round() as usize;
    if !(step > 0.0) || k == 0 || (k as f64 * step - 0.9).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "conn step {step} must divide 0.9"
        )));
    }
    let px = unknown_pixels(pred, gt, trimap)?;
    let mut level = Array2::from_elem(pred.dim(), -1.0);
    for i in 1..=k {
        let theta = i as f64 * step;
        let both = Array2::from_shape_fn(pred.dim(), |p| pred[p] >= theta && gt[p] >= theta);
        let omega = largest_component(&both);
        if i == 1 && !omega.iter().any(|v| *v) {
            return sad_unknown(pred, gt, trimap);
        }
        let prev = (i - 1) as f64 * step;
        level.zip_mut_with(&omega, |l, &o| {
            if *l == -1.0 && !o {
                *l = prev;
            }
        });
    }
    level.mapv_inplace(|l| if l == -1.0 { 1.0 } else { l });
    let phi = |a: f64, l: f64| {
        let d = a - l;
        1.0 - if d >= CONN_MIN_DIFF { d } else { 0.0 }
    };
    Ok(px
        .iter()
        .map(|&p| (phi(pred[p], level[p]) - phi(gt[p], level[p])).abs())
        .sum::<f64>()
        / REPORT_SCALE)
}

/// One row of metric values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mse: f64,
    pub sad: f64,
    pub grad: f64,
    pub conn: f64,
}

pub fn evaluate(pred: &Array2<f64>, gt: &Array2<f64>, trimap: &Array2<f64>) -> Result<MetricRow> {
    Ok(MetricRow {
        mse: mse_unknown(pred, gt, trimap)?,
        sad: sad_unknown(pred, gt, trimap)?,
        grad: grad_error(pred, gt, trimap, DEFAULT_GRAD_SIGMA)?,
        conn: conn_error(pred, gt, trimap, DEFAULT_CONN_STEP)?,
    })
}

/// Arithmetic mean of the rows, summed in order.
pub fn mean_row(rows: &[MetricRow]) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(Error::EmptyRegion("no metric rows to aggregate".into()));
    }
    let n = rows.len() as f64;
    let mut m = MetricRow::default();
    for r in rows {
        m.mse += r.mse;
        m.sad += r.sad;
        m.grad += r.grad;
        m.conn += r.conn;
    }
    m.mse /= n;
    m.sad /= n;
    m.grad /= n;
    m.conn /= n;
    Ok(m)
}
