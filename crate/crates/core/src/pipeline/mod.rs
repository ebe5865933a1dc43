//! Teacher training, the training stage, evaluation, run directories and the
//! experiment presets.

pub mod engine;
mod presets;
mod report;
mod rundir;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::StageConfig;
use crate::data::CompositeSample;
use crate::error::{Error, Result};
use crate::losses::{compute_ofd_margin, validate_eta, KdMethod, Regressor, StageWeights};
use crate::metrics::{evaluate, mean_row, MetricRow};
use crate::netgraph::{build_mini_matting_net, count_flops, count_params, NetworkGraph};

pub use engine::{derive_seed, near_zero_fraction, EpochLog, TrainLog};
pub use presets::{run_experiment_preset, Preset, PresetInputs};
pub use report::{Report, ReportRow};
pub use rundir::{runs_root, RunDir};

/// Trains a fresh network on the alpha loss alone.
pub fn train_teacher(
    cfg: &StageConfig,
    samples: &[CompositeSample],
) -> Result<(NetworkGraph, TrainLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "teacher-init"));
    let mut net = build_mini_matting_net(cfg.width_multiplier, &mut rng)?;
    let spec = engine::StageSpec {
        name: "teacher",
        weights: StageWeights {
            gt: 1.0,
            teacher: 0.0,
            sparsity: 0.0,
            kd: 0.0,
        },
        sparsity: false,
        schedule: cfg.teacher,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "teacher"),
    };
    let log = engine::optimize(&mut net, samples, &spec, None, None)?;
    Ok((net, log))
}

/// Learned state of the training stage that is not part of the network.
pub struct TrainArtifacts {
    pub log: TrainLog,
    /// OFD regressors, dropped at export.
    pub regressors: Vec<Regressor>,
}

/// Re-initialises the pruned architecture and trains it under the
/// training-stage loss. Neither input network is modified.
pub fn run_train_stage(
    pruned: &NetworkGraph,
    teacher: &NetworkGraph,
    cfg: &StageConfig,
    samples: &[CompositeSample],
) -> Result<(NetworkGraph, TrainArtifacts)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-init"));
    let mut student = pruned.reinitialized(&mut rng)?;
    let mut cfg = cfg.clone();
    cfg.resolve_kd_weights(teacher)?;
    let weights = cfg.weights.stage_weights()?;
    let spec = engine::StageSpec {
        name: "train",
        weights,
        sparsity: false,
        schedule: cfg.train,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "train"),
    };

    let teacher_sites = if weights.kd != 0.0 {
        validate_eta(teacher, &cfg.eta, cfg.strict_eta)?;
        validate_eta(&student, &cfg.eta, cfg.strict_eta)
            .map_err(|e| Error::Config(format!("pruned student: {e}")))?;
        engine::kd_layer_ids(teacher, &cfg.eta, &cfg.kd)?
    } else {
        Vec::new()
    };
    let student_sites = engine::kd_layer_ids(&student, &cfg.eta, &cfg.kd).unwrap_or_default();
    let cache = engine::teacher_cache(teacher, samples, &teacher_sites, cfg.batch_size)?;
    let (margins, regressors) = match cfg.kd {
        KdMethod::Ofd if weights.kd != 0.0 => {
            let mut rrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "regressor-init"));
            let margins = teacher_sites
                .iter()
                .map(|s| compute_ofd_margin(teacher.bn(s).unwrap()))
                .collect();
            let regs = teacher_sites
                .iter()
                .zip(&student_sites)
                .map(|(t, s)| {
                    Regressor::conv1x1(
                        teacher.channels_of(t).unwrap(),
                        student.channels_of(s).unwrap(),
                        &mut rrng,
                    )
                })
                .collect();
            (margins, regs)
        }
        _ => (Vec::new(), vec![Regressor::Identity; teacher_sites.len()]),
    };
    let mut distill = engine::Distill {
        method: &cfg.kd,
        cache: &cache,
        student_sites: if weights.kd != 0.0 {
            student_sites
        } else {
            Vec::new()
        },
        margins,
        regressors,
    };
    let log = engine::optimize(
        &mut student,
        samples,
        &spec,
        Some(&cache.alpha),
        Some(&mut distill),
    )?;
    Ok((
        student,
        TrainArtifacts {
            log,
            regressors: distill.regressors,
        },
    ))
}

/// Metrics of a network on a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_image: Vec<MetricRow>,
    pub mean: MetricRow,
    pub params: u64,
    pub flops: u64,
}

pub fn evaluate_net(
    net: &NetworkGraph,
    samples: &[CompositeSample],
    batch_size: usize,
) -> Result<EvalResult> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyRegion("no samples to evaluate".into()))?;
    let (h, w) = first.size();
    let preds = engine::predict_all(net, samples, batch_size)?;
    let per_image = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| evaluate(p, &s.alpha, &s.trimap))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult {
        mean: mean_row(&per_image)?,
        per_image,
        params: count_params(net),
        flops: count_flops(net, h, w)?,
    })
}
