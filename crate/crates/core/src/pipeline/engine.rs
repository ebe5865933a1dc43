//! The optimisation loop shared by the teacher, pruning and training stages.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Schedule;
use crate::data::{make_batch, CompositeSample};
use crate::error::{Error, Result};
use crate::losses::{
    pruning_stage_loss, training_stage_loss, FeatureMap, KdMethod, KdSite, Regressor, Role,
    StageInputs, StageLoss, StageWeights,
};
use crate::netgraph::{LayerKind, NetworkGraph, Scope};
use crate::nn::{
    backward, cosine_lr, forward, predict, update_running_stats, LayerGrad, Mode, RmsProp, Tensor,
};

pub const BN_MOMENTUM: f32 = 0.1;
/// `|gamma|` below this counts as near zero in the sparsity statistics.
pub const NEAR_ZERO_GAMMA: f64 = 1e-2;

/// Seed for one named stage, derived from the run seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h).next_u64()
}

pub fn near_zero_fraction(net: &NetworkGraph) -> f64 {
    let (mut n, mut z) = (0usize, 0usize);
    for id in net.bn_ids(Scope::All) {
        for g in net.bn(id).unwrap().gamma.iter() {
            n += 1;
            if ((*g) as f64).abs() < NEAR_ZERO_GAMMA {
                z += 1;
            }
        }
    }
    z as f64 / n.max(1) as f64
}

/// Mean loss terms of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub alpha_gt: f64,
    pub alpha_teacher: f64,
    pub sparsity: f64,
    pub kd: f64,
    pub near_zero_gamma: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Total loss of the last epoch.
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Invariant(e.to_string()))
    }
}

/// Layer ids whose outputs are distilled. OFD works on pre-ReLU responses, so
/// a ReLU site is replaced by the BN that feeds it.
pub fn kd_layer_ids(net: &NetworkGraph, eta: &[String], method: &KdMethod) -> Result<Vec<String>> {
    eta.iter()
        .map(|id| {
            let layer = net.layer(id).ok_or_else(|| {
                Error::Config(format!(
                    "distillation site `{id}` is not a layer of the network"
                ))
            })?;
            if !matches!(method, KdMethod::Ofd) {
                return Ok(id.clone());
            }
            let bn = match layer.kind {
                LayerKind::Relu => layer.inputs[0].clone(),
                _ => id.clone(),
            };
            match net.layer(&bn).map(|l| &l.kind) {
                Some(LayerKind::Bn { .. }) => Ok(bn),
                _ => Err(Error::Config(format!(
                    "OFD site `{id}` is not a BN layer or a ReLU after one"
                ))),
            }
        })
        .collect()
}

/// Teacher predictions and features for every sample, computed once in
/// evaluation mode.
pub struct TeacherCache {
    pub alpha: Vec<Array2<f64>>,
    /// `[sample][site]`, each `[C, H, W]`.
    pub features: Vec<Vec<Array3<f32>>>,
}

pub fn teacher_cache(
    teacher: &NetworkGraph,
    samples: &[CompositeSample],
    sites: &[String],
    batch_size: usize,
) -> Result<TeacherCache> {
    let out_idx = teacher.layer_index(teacher.output_id()).unwrap();
    let site_idx: Vec<usize> = sites
        .iter()
        .map(|s| {
            teacher.layer_index(s).ok_or_else(|| {
                Error::Config(format!("distillation site `{s}` is not in the teacher"))
            })
        })
        .collect::<Result<_>>()?;
    let mut cache = TeacherCache {
        alpha: Vec::with_capacity(samples.len()),
        features: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&CompositeSample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let acts = forward(teacher, &batch.input, Mode::Eval)?;
        for i in 0..chunk.len() {
            cache.alpha.push(
                acts.outputs[out_idx]
                    .slice(s![i, 0, .., ..])
                    .mapv(|v| v as f64),
            );
            cache.features.push(
                site_idx
                    .iter()
                    .map(|&k| acts.outputs[k].index_axis(Axis(0), i).to_owned())
                    .collect(),
            );
        }
    }
    Ok(cache)
}

/// Distillation part of a stage.
pub struct Distill<'a> {
    pub method: &'a KdMethod,
    pub cache: &'a TeacherCache,
    /// Student layer ids, aligned with the cached teacher sites.
    pub student_sites: Vec<String>,
    /// Per-site OFD margins (empty for other methods).
    pub margins: Vec<Vec<f64>>,
    /// Per-site student regressors, trained along with the network.
    pub regressors: Vec<Regressor>,
}

pub struct StageSpec<'a> {
    pub name: &'a str,
    pub weights: StageWeights,
    /// Adds the `|gamma|` penalty (pruning stage).
    pub sparsity: bool,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
}

fn to_alpha3(t: &Tensor) -> Array3<f64> {
    t.index_axis(Axis(1), 0).mapv(|v| v as f64)
}

fn stack3(items: &[&Array3<f32>]) -> Array4<f64> {
    let (c, h, w) = items[0].dim();
    let mut out = Array4::zeros((items.len(), c, h, w));
    for (i, a) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&a.mapv(|v| v as f64));
    }
    out
}

/// Optimises `net` in place. Teacher outputs, when present, come from
/// `distill.cache` or `teacher_alpha`; without a teacher the ground truth
/// stands in for the teacher prediction, whose weight must then be zero.
pub fn optimize(
    net: &mut NetworkGraph,
    samples: &[CompositeSample],
    spec: &StageSpec,
    teacher_alpha: Option<&[Array2<f64>]>,
    mut distill: Option<&mut Distill>,
) -> Result<TrainLog> {
    let mut log = TrainLog {
        stage: spec.name.to_string(),
        epochs: Vec::new(),
    };
    if samples.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "stage `{}` has no training samples",
            spec.name
        )));
    }
    if teacher_alpha.is_none() && spec.weights.teacher != 0.0 {
        return Err(Error::Config(format!(
            "stage `{}` weighs a teacher term but has no teacher",
            spec.name
        )));
    }
    let kd_active = spec.weights.kd != 0.0 && distill.is_some();
    let out_idx = net.layer_index(net.output_id()).unwrap();
    let site_idx: Vec<usize> = match &distill {
        Some(d) if kd_active => d
            .student_sites
            .iter()
            .map(|s| {
                net.layer_index(s).ok_or_else(|| {
                    Error::Config(format!("distillation site `{s}` is not in the student"))
                })
            })
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let no_kd = KdMethod::nst();
    let method = distill.as_ref().map_or(&no_kd, |d| d.method);

    let batch_size = spec.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch_size);
    let total_steps = steps_per_epoch * spec.schedule.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = RmsProp::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..spec.schedule.epochs {
        order.shuffle(&mut rng);
        let mut acc = StageLoss::default();
        let mut lr = 0.0;
        for chunk in order.chunks(batch_size) {
            lr = cosine_lr(spec.schedule.learning_rate, step, total_steps);
            let refs: Vec<&CompositeSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = make_batch(&refs)?;
            let acts = forward(net, &batch.input, Mode::Train)?;
            let alpha = to_alpha3(&acts.outputs[out_idx]);
            let t_alpha = match teacher_alpha {
                Some(ta) => {
                    let mut a = Array3::zeros(alpha.raw_dim());
                    for (k, &i) in chunk.iter().enumerate() {
                        a.index_axis_mut(Axis(0), k).assign(&ta[i]);
                    }
                    a
                }
                None => batch.alpha.clone(),
            };
            let mut sites = Vec::with_capacity(site_idx.len());
            if let Some(d) = distill.as_deref() {
                for (j, &k) in site_idx.iter().enumerate() {
                    let t_feats: Vec<&Array3<f32>> =
                        chunk.iter().map(|&i| &d.cache.features[i][j]).collect();
                    let teacher = FeatureMap::new(
                        stack3(&t_feats),
                        d.student_sites[j].clone(),
                        Role::Teacher,
                    )?;
                    let student = FeatureMap::from_f32(
                        &acts.outputs[k],
                        d.student_sites[j].clone(),
                        Role::Student,
                    )?;
                    sites.push(KdSite {
                        teacher,
                        student,
                        margin: d.margins.get(j).cloned().unwrap_or_default(),
                        regressor: d.regressors.get(j).cloned().unwrap_or(Regressor::Identity),
                    });
                }
            }
            let inputs = StageInputs {
                student_alpha: &alpha,
                teacher_alpha: &t_alpha,
                gt_alpha: &batch.alpha,
                unknown: &batch.unknown,
                method,
                sites: &sites,
            };
            let (loss, grads) = if spec.sparsity {
                pruning_stage_loss(&inputs, net, &spec.weights)?
            } else {
                training_stage_loss(&inputs, &spec.weights)?
            };
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    stage: spec.name.to_string(),
                    step,
                    detail: format!("loss terms {loss:?}"),
                });
            }

            let mut seeds = vec![(out_idx, grads.alpha.mapv(|v| v as f32).insert_axis(Axis(1)))];
            for (g, &k) in grads.features.iter().zip(&site_idx) {
                seeds.push((k, g.mapv(|v| v as f32)));
            }
            let mut pg = backward(net, &acts, seeds)?;
            for (id, g) in &grads.gamma {
                if let Some(LayerGrad::Bn { gamma, .. }) = pg.get_mut(id) {
                    gamma.zip_mut_with(g, |a, b| *a += *b as f32);
                }
            }
            if pg.values().any(|g| match g {
                LayerGrad::Conv { weight, bias } => {
                    weight.iter().any(|v| !v.is_finite())
                        || bias
                            .as_ref()
                            .is_some_and(|b| b.iter().any(|v| !v.is_finite()))
                }
                LayerGrad::Bn { gamma, beta } => {
                    gamma.iter().chain(beta.iter()).any(|v| !v.is_finite())
                }
            }) {
                return Err(Error::Diverged {
                    stage: spec.name.to_string(),
                    step,
                    detail: "non-finite parameter gradient".into(),
                });
            }
            opt.step(net, &pg, lr);
            if let Some(d) = distill.as_deref_mut() {
                for (j, r) in grads.regressors.iter().enumerate() {
                    if let (Some(dw), Some(Regressor::Conv1x1(w))) = (r, d.regressors.get_mut(j)) {
                        opt.update_f64(
                            &format!("regressor/{j}"),
                            w.as_slice_mut().unwrap(),
                            dw.as_slice().unwrap(),
                            lr,
                        );
                    }
                }
            }
            update_running_stats(net, &acts, BN_MOMENTUM);

            acc.total += loss.total;
            acc.alpha_gt += loss.alpha_gt;
            acc.alpha_teacher += loss.alpha_teacher;
            acc.sparsity += loss.sparsity;
            acc.kd += loss.kd;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let e = EpochLog {
            epoch,
            lr,
            total: acc.total / n,
            alpha_gt: acc.alpha_gt / n,
            alpha_teacher: acc.alpha_teacher / n,
            sparsity: acc.sparsity / n,
            kd: acc.kd / n,
            near_zero_gamma: near_zero_fraction(net),
        };
        log::info!(
            "{} epoch {}: loss {:.6} (alpha {:.6}, kd {:.6}), near-zero gamma {:.3}",
            spec.name,
            epoch,
            e.total,
            e.alpha_gt,
            e.kd,
            e.near_zero_gamma
        );
        log.epochs.push(e);
    }
    Ok(log)
}

/// Evaluation-mode predictions, one `[H, W]` matte per sample.
pub fn predict_all(
    net: &NetworkGraph,
    samples: &[CompositeSample],
    batch_size: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&CompositeSample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let y = predict(net, &batch.input)?;
        for i in 0..chunk.len() {
            out.push(y.slice(s![i, 0, .., ..]).mapv(|v| v as f64));
        }
    }
    Ok(out)
}
