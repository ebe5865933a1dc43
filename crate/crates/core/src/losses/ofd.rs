use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erfc;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::netgraph::BatchNormParams;

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Per-channel margin: the expected value of the teacher's pre-ReLU response
/// given that it is negative, modelling the response as `N(beta, gamma^2)`.
/// Channels whose negative tail has probability below 1e-6, or whose scale is
/// zero, get margin 0.
pub fn compute_ofd_margin(teacher_bn: &BatchNormParams) -> Vec<f64> {
    teacher_bn
        .gamma
        .iter()
        .zip(teacher_bn.beta.iter())
        .map(|(&g, &b)| {
            let s = (g as f64).abs();
            let b = b as f64;
            if s == 0.0 {
                return 0.0;
            }
            let tail = std_normal_cdf(-b / s);
            if tail <= 1e-6 {
                return 0.0;
            }
            (b - s * std_normal_pdf(b / s) / tail).min(0.0)
        })
        .collect()
}

/// Student-side transform applied before the comparison.
#[derive(Clone, Debug, PartialEq)]
pub enum Regressor {
    Identity,
    /// Per-pixel channel mixing, `[teacher_channels, student_channels]`.
    Conv1x1(Array2<f64>),
}

impl Regressor {
    pub fn conv1x1<R: Rng + ?Sized>(
        teacher_channels: usize,
        student_channels: usize,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, (2.0 / student_channels as f64).sqrt()).expect("finite std");
        Regressor::Conv1x1(Array2::from_shape_simple_fn(
            (teacher_channels, student_channels),
            || normal.sample(rng),
        ))
    }

    fn apply(&self, fs: &Array4<f64>) -> Result<Array4<f64>> {
        match self {
            Regressor::Identity => Ok(fs.clone()),
            Regressor::Conv1x1(w) => {
                let (b, cs, h, wd) = fs.dim();
                if w.ncols() != cs {
                    return Err(Error::Shape(format!(
                        "regressor expects {} channels, got {cs}",
                        w.ncols()
                    )));
                }
                let mut out = Array4::zeros((b, w.nrows(), h, wd));
                for n in 0..b {
                    let x = fs.index_axis(Axis(0), n);
                    let x = x.to_shape((cs, h * wd)).expect("contiguous");
                    let y = w.dot(&x);
                    out.index_axis_mut(Axis(0), n)
                        .assign(&y.into_shape_with_order((w.nrows(), h, wd)).unwrap());
                }
                Ok(out)
            }
        }
    }
}

/// Gradients of the OFD loss.
#[derive(Clone, Debug)]
pub struct OfdGrad {
    pub student: Array4<f64>,
    pub regressor: Option<Array2<f64>>,
}

/// Partial L2 distance between the margin-ReLU'd teacher pre-activation and
/// the regressed student feature, averaged over all teacher-shaped elements.
pub fn ofd_loss(
    ft_pre_relu: &FeatureMap,
    fs: &FeatureMap,
    margin: &[f64],
    regressor: &Regressor,
) -> Result<f64> {
    ofd_loss_grad(ft_pre_relu, fs, margin, regressor).map(|(v, _)| v)
}

pub fn ofd_loss_grad(
    ft_pre_relu: &FeatureMap,
    fs: &FeatureMap,
    margin: &[f64],
    regressor: &Regressor,
) -> Result<(f64, OfdGrad)> {
    super::check_same_spatial(ft_pre_relu, fs)?;
    let ct = ft_pre_relu.channels();
    if margin.len() != ct {
        return Err(Error::Shape(format!(
            "margin has {} entries for {ct} teacher channels",
            margin.len()
        )));
    }
    let s = regressor.apply(&fs.data)?;
    if s.shape()[1] != ct {
        return Err(Error::Shape(format!(
            "regressed student has {} channels, teacher has {ct}",
            s.shape()[1]
        )));
    }
    let n = s.len() as f64;
    let mut total = 0.0;
    let mut ds = Array4::zeros(s.raw_dim());
    for ((idx, &t_raw), &sv) in ft_pre_relu.data.indexed_iter().zip(s.iter()) {
        let t = t_raw.max(margin[idx.1]);
        if sv <= t && t <= 0.0 {
            continue;
        }
        let d = sv - t;
        total += d * d;
        ds[idx] = 2.0 * d / n;
    }
    let grad = match regressor {
        Regressor::Identity => OfdGrad {
            student: ds,
            regressor: None,
        },
        Regressor::Conv1x1(w) => {
            let (b, cs, h, wd) = fs.data.dim();
            let mut dx = Array4::zeros(fs.data.raw_dim());
            let mut dw = Array2::zeros(w.raw_dim());
            for i in 0..b {
                let dsi = ds.index_axis(Axis(0), i);
                let dsi = dsi.to_shape((ct, h * wd)).unwrap();
                let xi = fs.data.index_axis(Axis(0), i);
                let xi = xi.to_shape((cs, h * wd)).unwrap();
                dw += &dsi.dot(&xi.t());
                let dxi = w.t().dot(&dsi);
                dx.index_axis_mut(Axis(0), i)
                    .assign(&dxi.into_shape_with_order((cs, h, wd)).unwrap());
            }
            OfdGrad {
                student: dx,
                regressor: Some(dw),
            }
        }
    };
    Ok((total / n, grad))
}
