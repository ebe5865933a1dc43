use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::StageConfig;
use crate::data::CompositeSample;
use crate::error::{Error, Result};
use crate::losses::{compute_ofd_margin, validate_eta, KdMethod, Regressor};
use crate::netgraph::{mini_matting_layers, NetworkGraph};
use crate::pipeline::engine::{
    derive_seed, kd_layer_ids, optimize, teacher_cache, Distill, StageSpec, TrainLog,
};

pub use crate::pipeline::engine::NEAR_ZERO_GAMMA;

pub type PruneEpoch = crate::pipeline::engine::EpochLog;
pub type PruneLog = TrainLog;

/// Trains a freshly initialised full-width student under the pruning-stage
/// loss. The teacher is only read.
pub fn run_prune_stage(
    teacher: &NetworkGraph,
    cfg: &StageConfig,
    samples: &[CompositeSample],
) -> Result<(NetworkGraph, PruneLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "student-init"));
    let mut student =
        NetworkGraph::with_random_weights(mini_matting_layers(cfg.width_multiplier)?, &mut rng)?;
    if !student.same_architecture(teacher) {
        return Err(Error::Config(format!(
            "teacher architecture differs from a width-{} student",
            cfg.width_multiplier
        )));
    }
    validate_eta(teacher, &cfg.eta, cfg.strict_eta)?;
    let mut cfg = cfg.clone();
    cfg.resolve_kd_weights(teacher)?;
    let weights = cfg.lambdas.stage_weights()?;

    let sites = kd_layer_ids(teacher, &cfg.eta, &cfg.kd)?;
    let cache = teacher_cache(teacher, samples, &sites, cfg.batch_size)?;
    let margins = match cfg.kd {
        KdMethod::Ofd => sites
            .iter()
            .map(|s| compute_ofd_margin(teacher.bn(s).unwrap()))
            .collect(),
        _ => Vec::new(),
    };
    let mut distill = Distill {
        method: &cfg.kd,
        cache: &cache,
        student_sites: sites.clone(),
        margins,
        regressors: vec![Regressor::Identity; sites.len()],
    };
    let spec = StageSpec {
        name: "prune",
        weights,
        sparsity: true,
        schedule: cfg.prune,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, "prune"),
    };
    let log = optimize(
        &mut student,
        samples,
        &spec,
        Some(&cache.alpha),
        Some(&mut distill),
    )?;
    Ok((student, log))
}
