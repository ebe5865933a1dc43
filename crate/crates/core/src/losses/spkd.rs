use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_same_spatial, FeatureMap};
use crate::error::{Error, Result};

/// Which similarity matrices are matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpkdKinds {
    pub spatial: bool,
    pub channel: bool,
}

impl Default for SpkdKinds {
    fn default() -> Self {
        Self {
            spatial: true,
            channel: true,
        }
    }
}

impl SpkdKinds {
    pub fn spatial_only() -> Self {
        Self {
            spatial: true,
            channel: false,
        }
    }
}

/// Sum over the requested kinds of the mean squared difference between the
/// row-normalised teacher and student similarity matrices, averaged over the
/// batch.
pub fn spkd_loss(ft: &FeatureMap, fs: &FeatureMap, kinds: SpkdKinds) -> Result<f64> {
    spkd_loss_grad(ft, fs, kinds).map(|(v, _)| v)
}

pub fn spkd_loss_grad(
    ft: &FeatureMap,
    fs: &FeatureMap,
    kinds: SpkdKinds,
) -> Result<(f64, Array4<f64>)> {
    check_same_spatial(ft, fs)?;
    if !kinds.spatial && !kinds.channel {
        return Err(Error::Config(
            "SPKD needs at least one similarity kind".into(),
        ));
    }
    let (b, ct, h, w) = ft.data.dim();
    let cs = fs.channels();
    if kinds.channel && ct != cs {
        return Err(Error::Config(format!(
            "channel similarity needs equal channel counts, teacher {ct} vs student {cs}"
        )));
    }
    let hw = h * w;
    let mut total = 0.0;
    let mut grad = Array4::zeros(fs.data.raw_dim());
    for n in 0..b {
        let at = ft.data.index_axis(Axis(0), n);
        let at = at.to_shape((ct, hw)).expect("contiguous");
        let as_ = fs.data.index_axis(Axis(0), n);
        let as_ = as_.to_shape((cs, hw)).expect("contiguous");
        let mut d = Array2::zeros((cs, hw));
        if kinds.spatial {
            let (v, g) = spatial(at.view(), as_.view());
            total += v;
            d += &g;
        }
        if kinds.channel {
            let (v, g) = channel(at.view(), as_.view());
            total += v;
            d += &g;
        }
        grad.index_axis_mut(Axis(0), n)
            .assign(&d.into_shape_with_order((cs, h, w)).expect("contiguous"));
    }
    let inv_b = 1.0 / b as f64;
    grad *= inv_b;
    Ok((total * inv_b, grad))
}

fn colsum_prod(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    (a * b).sum_axis(Axis(0))
}

/// Spatial term without materialising the `HW x HW` Gram matrices. Row `i`
/// of `AᵀA` has squared norm `a_iᵀ (AAᵀ) a_i`, and the dot product of the
/// teacher and student rows is `at_iᵀ (At Asᵀ) as_i`.
fn spatial(at: ArrayView2<f64>, as_: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let hw = at.ncols();
    let at = at.to_owned();
    let as_ = as_.to_owned();
    let st = at.dot(&at.t());
    let ss = as_.dot(&as_.t());
    let k = at.dot(&as_.t());
    let rt2 = colsum_prod(&at, &st.dot(&at));
    let rs2 = colsum_prod(&as_, &ss.dot(&as_));
    let c = colsum_prod(&at, &k.dot(&as_));

    let mut u = Array1::zeros(hw);
    let mut v = Array1::zeros(hw);
    let (mut nt, mut ns) = (0.0, 0.0);
    for i in 0..hw {
        let (t, s) = (rt2[i].sqrt(), rs2[i].sqrt());
        if t > 0.0 {
            nt += 1.0;
        }
        if s > 0.0 {
            ns += 1.0;
        }
        if t > 0.0 && s > 0.0 {
            u[i] = 1.0 / (t * s);
            v[i] = -c[i] * u[i] / (2.0 * rs2[i]);
        }
    }
    let f = (&u * &c).sum();
    let scale = 1.0 / (hw * hw) as f64;
    let loss = (nt + ns - 2.0 * f) * scale;

    let at_u = &at * &u;
    let as_u = &as_ * &u;
    let as_v = &as_ * &v;
    let df = k.t().dot(&at_u)
        + as_u.dot(&at.t()).dot(&at)
        + ss.dot(&as_v) * 2.0
        + as_v.dot(&as_.t()).dot(&as_) * 2.0;
    (loss, df * (-2.0 * scale))
}

fn normalize_rows(g: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = g.clone();
    let mut norms = Vec::with_capacity(g.nrows());
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

fn channel(at: ArrayView2<f64>, as_: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let c = at.nrows();
    let (gt, _) = normalize_rows(&at.dot(&at.t()));
    let (gs, norms) = normalize_rows(&as_.dot(&as_.t()));
    let diff = &gs - &gt;
    let scale = 1.0 / (c * c) as f64;
    let loss = diff.mapv(|x| x * x).sum() * scale;
    let dn = diff * (2.0 * scale);
    let mut dg = Array2::zeros((c, c));
    for i in 0..c {
        if norms[i] == 0.0 {
            continue;
        }
        let s = gs.row(i);
        let ds = dn.row(i);
        let proj = s.dot(&ds);
        dg.row_mut(i).assign(&((&ds - &(&s * proj)) / norms[i]));
    }
    let sym = &dg + &dg.t();
    (loss, sym.dot(&as_))
}
