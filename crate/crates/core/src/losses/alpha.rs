use ndarray::Array3;

use super::AlphaTriple;
use crate::error::{Error, Result};

/// Default squared epsilon of the Charbonnier-style alpha loss.
pub const DEFAULT_EPS_SQ: f64 = 1e-12;

/// Mean over unknown pixels of `sqrt((pred - ref)^2 + eps_sq)`.
pub fn alpha_prediction_loss(t: &AlphaTriple, eps_sq: f64) -> Result<f64> {
    alpha_prediction_loss_grad(t, eps_sq).map(|(v, _)| v)
}

/// Loss value and its gradient with respect to `alpha_pred`.
pub fn alpha_prediction_loss_grad(t: &AlphaTriple, eps_sq: f64) -> Result<(f64, Array3<f64>)> {
    if t.alpha_pred.shape() != t.alpha_ref.shape() || t.alpha_pred.shape() != t.unknown_mask.shape()
    {
        return Err(Error::Shape(format!(
            "alpha shapes differ: pred {:?}, ref {:?}, mask {:?}",
            t.alpha_pred.shape(),
            t.alpha_ref.shape(),
            t.unknown_mask.shape()
        )));
    }
    if !(eps_sq > 0.0) {
        return Err(Error::InvalidArgument("eps_sq must be positive".into()));
    }
    let count = t.unknown_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyRegion(
            "alpha loss needs at least one unknown pixel".into(),
        ));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Array3::zeros(t.alpha_pred.raw_dim());
    let mut sum = 0.0;
    ndarray::Zip::from(&mut grad)
        .and(&t.alpha_pred)
        .and(&t.alpha_ref)
        .and(&t.unknown_mask)
        .for_each(|g, &p, &r, &m| {
            if m {
                let d = p - r;
                let s = (d * d + eps_sq).sqrt();
                sum += s;
                *g = d / s * inv;
            }
        });
    Ok((sum * inv, grad))
}
