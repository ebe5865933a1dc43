//! Loss functions for the pruning and training stages.
//!
//! Every loss returns its value together with the gradient with respect to
//! the student-side inputs; teacher-side inputs are plain data and never
//! receive gradients.

mod alpha;
mod nst;
mod ofd;
mod spkd;
mod stage;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use alpha::{alpha_prediction_loss, alpha_prediction_loss_grad, DEFAULT_EPS_SQ};
pub use nst::{nst_loss, nst_loss_grad};
pub use ofd::{compute_ofd_margin, ofd_loss, ofd_loss_grad, OfdGrad, Regressor};
pub use spkd::{spkd_loss, spkd_loss_grad, SpkdKinds};
pub use stage::{
    kd_site_loss, pruning_stage_loss, sparsity_penalty, sparsity_penalty_grad, training_stage_loss,
    validate_eta, KdSite, StageGrads, StageInputs, StageLoss, StageWeights,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// A batch of activations taken from one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[batch, channels, height, width]`
    pub data: Array4<f64>,
    pub layer_id: String,
    pub role: Role,
}

impl FeatureMap {
    pub fn new(data: Array4<f64>, layer_id: impl Into<String>, role: Role) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "feature map {:?} has an empty axis",
                data.shape()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            data,
            layer_id: layer_id.into(),
            role,
        })
    }

    pub fn from_f32(data: &Array4<f32>, layer_id: impl Into<String>, role: Role) -> Result<Self> {
        Self::new(data.mapv(|v| v as f64), layer_id, role)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Predicted and reference mattes with the region the loss is evaluated on.
/// All three arrays are `[batch, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTriple {
    pub alpha_pred: Array3<f64>,
    pub alpha_ref: Array3<f64>,
    pub unknown_mask: Array3<bool>,
}

/// Feature distillation method and its options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum KdMethod {
    Nst {
        #[serde(default = "default_nst_degree")]
        degree: i32,
        #[serde(default)]
        bias: f64,
    },
    Ofd,
    Spkd {
        #[serde(default)]
        kinds: SpkdKinds,
    },
}

fn default_nst_degree() -> i32 {
    2
}

impl KdMethod {
    pub fn nst() -> Self {
        KdMethod::Nst {
            degree: 2,
            bias: 0.0,
        }
    }

    pub fn spkd() -> Self {
        KdMethod::Spkd {
            kinds: SpkdKinds::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KdMethod::Nst { .. } => "NST",
            KdMethod::Ofd => "OFD",
            KdMethod::Spkd { .. } => "SPKD",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nst" => Ok(Self::nst()),
            "ofd" => Ok(KdMethod::Ofd),
            "spkd" => Ok(Self::spkd()),
            other => Err(Error::Config(format!("unknown KD method `{other}`"))),
        }
    }
}

pub(crate) fn check_same_spatial(ft: &FeatureMap, fs: &FeatureMap) -> Result<()> {
    let (bt, _, ht, wt) = ft.data.dim();
    let (bs, _, hs, ws) = fs.data.dim();
    if (bt, ht, wt) != (bs, hs, ws) {
        return Err(Error::Shape(format!(
            "teacher feature {:?} and student feature {:?} differ in batch or spatial size",
            ft.data.shape(),
            fs.data.shape()
        )));
    }
    Ok(())
}
