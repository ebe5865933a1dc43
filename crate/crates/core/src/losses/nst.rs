use ndarray::{Array2, Array4, ArrayView2, Axis};

use super::{check_same_spatial, FeatureMap};
use crate::error::{Error, Result};

/// Rows of `x` scaled to unit L2 norm; zero rows stay zero. Returns the
/// normalised matrix and the original norms.
fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (out, norms)
}

/// Backpropagates through `normalize_rows`.
fn normalize_rows_backward(
    normed: &Array2<f64>,
    norms: &[f64],
    d_normed: &Array2<f64>,
) -> Array2<f64> {
    let mut dx = Array2::zeros(normed.raw_dim());
    for (i, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        let s = normed.row(i);
        let ds = d_normed.row(i);
        let proj = s.dot(&ds);
        let mut row = dx.row_mut(i);
        row.assign(&((&ds - &(&s * proj)) / n));
    }
    dx
}

/// Polynomial-kernel squared MMD between the L2-normalised channel maps of
/// teacher and student, averaged over the batch.
pub fn nst_loss(ft: &FeatureMap, fs: &FeatureMap, degree: i32, bias: f64) -> Result<f64> {
    nst_loss_grad(ft, fs, degree, bias).map(|(v, _)| v)
}

/// Value and gradient with respect to the student feature map.
pub fn nst_loss_grad(
    ft: &FeatureMap,
    fs: &FeatureMap,
    degree: i32,
    bias: f64,
) -> Result<(f64, Array4<f64>)> {
    check_same_spatial(ft, fs)?;
    if degree < 1 {
        return Err(Error::InvalidArgument(format!(
            "NST kernel degree must be >= 1, got {degree}"
        )));
    }
    let (b, ct, h, w) = ft.data.dim();
    let cs = fs.data.shape()[1];
    let hw = h * w;
    let kernel = |g: f64| (g + bias).powi(degree);
    let dkernel = |g: f64| degree as f64 * (g + bias).powi(degree - 1);

    let mut total = 0.0;
    let mut grad = Array4::zeros(fs.data.raw_dim());
    for n in 0..b {
        let t_raw = ft.data.index_axis(Axis(0), n);
        let s_raw = fs.data.index_axis(Axis(0), n);
        let t_raw = t_raw.to_shape((ct, hw)).expect("contiguous");
        let s_raw = s_raw.to_shape((cs, hw)).expect("contiguous");
        let (t, _) = normalize_rows(t_raw.view());
        let (s, s_norms) = normalize_rows(s_raw.view());

        let gtt = t.dot(&t.t());
        let gss = s.dot(&s.t());
        let gts = t.dot(&s.t());
        let mtt = gtt.mapv(kernel).mean().unwrap();
        let mss = gss.mapv(kernel).mean().unwrap();
        let mts = gts.mapv(kernel).mean().unwrap();
        total += mtt + mss - 2.0 * mts;

        let kss = gss.mapv(dkernel);
        let kts = gts.mapv(dkernel);
        let ds =
            kss.dot(&s) * (2.0 / (cs * cs) as f64) - kts.t().dot(&t) * (2.0 / (ct * cs) as f64);
        let dx = normalize_rows_backward(&s, &s_norms, &ds);
        grad.index_axis_mut(Axis(0), n)
            .assign(&dx.into_shape_with_order((cs, h, w)).expect("contiguous"));
    }
    let inv_b = 1.0 / b as f64;
    grad *= inv_b;
    Ok((total * inv_b, grad))
}
