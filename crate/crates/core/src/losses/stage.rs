use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{
    alpha_prediction_loss_grad, nst_loss_grad, ofd_loss_grad, spkd_loss_grad, AlphaTriple,
    FeatureMap, KdMethod, Regressor, SpkdKinds, DEFAULT_EPS_SQ,
};
use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, StageTag};

/// Sum of `|gamma|` over every BN channel of the network.
pub fn sparsity_penalty(net: &NetworkGraph) -> f64 {
    net.bn_ids(crate::netgraph::Scope::All)
        .into_iter()
        .map(|id| {
            net.bn(id)
                .unwrap()
                .gamma
                .iter()
                .map(|g| (*g as f64).abs())
                .sum::<f64>()
        })
        .sum()
}

/// Subgradient `sign(gamma)` of [`sparsity_penalty`], zero at zero.
pub fn sparsity_penalty_grad(net: &NetworkGraph) -> IndexMap<String, Array1<f64>> {
    net.bn_ids(crate::netgraph::Scope::All)
        .into_iter()
        .map(|id| {
            let g = net.bn(id).unwrap().gamma.mapv(|g| {
                if g > 0.0 {
                    1.0
                } else if g < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            (id.to_string(), g)
        })
        .collect()
}

/// Checks that every distillation site exists and, in strict mode, that none
/// of them sits in the decoder.
pub fn validate_eta(net: &NetworkGraph, eta: &[String], strict: bool) -> Result<()> {
    if eta.is_empty() {
        return Err(Error::Config("the distillation site list is empty".into()));
    }
    for id in eta {
        let layer = net.layer(id).ok_or_else(|| {
            Error::Config(format!(
                "distillation site `{id}` is not a layer of the network"
            ))
        })?;
        if strict && layer.stage == StageTag::Decoder {
            return Err(Error::Config(format!(
                "distillation site `{id}` is in the decoder; distillation is encoder-only unless strict_eta = false"
            )));
        }
    }
    Ok(())
}

/// Teacher and student features of one distillation site.
#[derive(Clone, Debug)]
pub struct KdSite {
    pub teacher: FeatureMap,
    pub student: FeatureMap,
    /// Per-channel teacher margin, only read by OFD.
    pub margin: Vec<f64>,
    /// Student-side regressor, only read by OFD.
    pub regressor: Regressor,
}

impl KdSite {
    pub fn new(teacher: FeatureMap, student: FeatureMap) -> Self {
        Self {
            teacher,
            student,
            margin: Vec::new(),
            regressor: Regressor::Identity,
        }
    }
}

/// Distillation loss of a single site with the gradients for the student
/// feature and, for OFD with a 1x1 regressor, the regressor weight.
pub fn kd_site_loss(
    method: &KdMethod,
    site: &KdSite,
) -> Result<(f64, Array4<f64>, Option<Array2<f64>>)> {
    match method {
        KdMethod::Nst { degree, bias } => {
            let (v, g) = nst_loss_grad(&site.teacher, &site.student, *degree, *bias)?;
            Ok((v, g, None))
        }
        KdMethod::Ofd => {
            let (v, g) =
                ofd_loss_grad(&site.teacher, &site.student, &site.margin, &site.regressor)?;
            Ok((v, g.student, g.regressor))
        }
        KdMethod::Spkd { kinds } => {
            let mut kinds = *kinds;
            if kinds.channel && site.teacher.channels() != site.student.channels() {
                kinds = SpkdKinds {
                    channel: false,
                    ..kinds
                };
                if !kinds.spatial {
                    return Err(Error::Config(format!(
                        "SPKD at `{}` has only the channel kind but channel counts differ",
                        site.student.layer_id
                    )));
                }
            }
            let (v, g) = spkd_loss_grad(&site.teacher, &site.student, kinds)?;
            Ok((v, g, None))
        }
    }
}

/// Balancing factors of a stage loss. In the training stage `sparsity` is
/// ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub gt: f64,
    pub teacher: f64,
    pub sparsity: f64,
    pub kd: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            gt: 1.0,
            teacher: 0.5,
            sparsity: 1e-4,
            kd: 1.0,
        }
    }
}

/// Everything a stage loss reads, except the network itself.
pub struct StageInputs<'a> {
    /// `[batch, height, width]` predictions of the network being trained.
    pub student_alpha: &'a Array3<f64>,
    pub teacher_alpha: &'a Array3<f64>,
    pub gt_alpha: &'a Array3<f64>,
    pub unknown: &'a Array3<bool>,
    pub method: &'a KdMethod,
    pub sites: &'a [KdSite],
}

/// Value of a stage loss with its unweighted terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub total: f64,
    pub alpha_gt: f64,
    pub alpha_teacher: f64,
    pub sparsity: f64,
    /// Sum over sites.
    pub kd: f64,
    pub kd_per_site: Vec<(String, f64)>,
}

/// Gradients of a stage loss, already multiplied by the weights.
#[derive(Clone, Debug)]
pub struct StageGrads {
    pub alpha: Array3<f64>,
    /// One entry per site, same order as `StageInputs::sites`.
    pub features: Vec<Array4<f64>>,
    pub regressors: Vec<Option<Array2<f64>>>,
    /// Per BN layer, empty in the training stage.
    pub gamma: IndexMap<String, Array1<f64>>,
}

fn alpha_and_kd(inputs: &StageInputs, w: &StageWeights) -> Result<(StageLoss, StageGrads)> {
    let triple = |reference: &Array3<f64>| AlphaTriple {
        alpha_pred: inputs.student_alpha.clone(),
        alpha_ref: reference.clone(),
        unknown_mask: inputs.unknown.clone(),
    };
    let (l_gt, g_gt) = alpha_prediction_loss_grad(&triple(inputs.gt_alpha), DEFAULT_EPS_SQ)?;
    let (l_t, g_t) = alpha_prediction_loss_grad(&triple(inputs.teacher_alpha), DEFAULT_EPS_SQ)?;
    let alpha = g_gt * w.gt + g_t * w.teacher;

    let mut loss = StageLoss {
        alpha_gt: l_gt,
        alpha_teacher: l_t,
        ..Default::default()
    };
    let mut features = Vec::with_capacity(inputs.sites.len());
    let mut regressors = Vec::with_capacity(inputs.sites.len());
    for site in inputs.sites {
        let (v, g, r) = kd_site_loss(inputs.method, site)?;
        loss.kd += v;
        loss.kd_per_site.push((site.student.layer_id.clone(), v));
        features.push(g * w.kd);
        regressors.push(r.map(|r| r * w.kd));
    }
    loss.total = w.gt * l_gt + w.teacher * l_t + w.kd * loss.kd;
    Ok((
        loss,
        StageGrads {
            alpha,
            features,
            regressors,
            gamma: IndexMap::new(),
        },
    ))
}

/// `gt * L_alpha(s, gt) + teacher * L_alpha(s, t) + sparsity * sum|gamma| + kd * sum KD`.
pub fn pruning_stage_loss(
    inputs: &StageInputs,
    net: &NetworkGraph,
    w: &StageWeights,
) -> Result<(StageLoss, StageGrads)> {
    let (mut loss, mut grads) = alpha_and_kd(inputs, w)?;
    loss.sparsity = sparsity_penalty(net);
    loss.total += w.sparsity * loss.sparsity;
    grads.gamma = sparsity_penalty_grad(net)
        .into_iter()
        .map(|(k, g)| (k, g * w.sparsity))
        .collect();
    Ok((loss, grads))
}

/// `gt * L_alpha(ps, gt) + teacher * L_alpha(ps, t) + kd * sum KD`.
pub fn training_stage_loss(
    inputs: &StageInputs,
    w: &StageWeights,
) -> Result<(StageLoss, StageGrads)> {
    alpha_and_kd(inputs, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::testutil::random4;
    use crate::losses::{alpha_prediction_loss, nst_loss, spkd_loss, Role};
    use crate::netgraph::build_mini_matting_net;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(data: Array4<f64>, id: &str, role: Role) -> FeatureMap {
        FeatureMap::new(data, id, role).unwrap()
    }

    struct Batch {
        s: Array3<f64>,
        t: Array3<f64>,
        gt: Array3<f64>,
        mask: Array3<bool>,
        sites: Vec<KdSite>,
    }

    fn batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a3 = || Array3::from_shape_simple_fn((2, 6, 6), || rng.gen::<f64>());
        let (s, t, gt) = (a3(), a3(), a3());
        let mask = Array3::from_shape_fn((2, 6, 6), |(_, y, x)| (y + x) % 3 != 0);
        let sites = (0..2)
            .map(|i| {
                KdSite::new(
                    fm(
                        random4((2, 3, 4, 4), &mut rng),
                        &format!("enc{i}"),
                        Role::Teacher,
                    ),
                    fm(
                        random4((2, 3, 4, 4), &mut rng),
                        &format!("enc{i}"),
                        Role::Student,
                    ),
                )
            })
            .collect();
        Batch {
            s,
            t,
            gt,
            mask,
            sites,
        }
    }

    fn inputs<'a>(b: &'a Batch, m: &'a KdMethod) -> StageInputs<'a> {
        StageInputs {
            student_alpha: &b.s,
            teacher_alpha: &b.t,
            gt_alpha: &b.gt,
            unknown: &b.mask,
            method: m,
            sites: &b.sites,
        }
    }

    #[test]
    fn sparsity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut net = build_mini_matting_net(0.5, &mut rng).unwrap();
        let ids: Vec<String> = net
            .bn_ids(crate::netgraph::Scope::All)
            .iter()
            .map(|s| s.to_string())
            .collect();
        for id in &ids {
            net.bn_mut(id).unwrap().gamma.fill(0.0);
        }
        assert_eq!(sparsity_penalty(&net), 0.0);
        let g = &mut net.bn_mut(&ids[0]).unwrap().gamma;
        g[0] = 0.5;
        g[1] = -0.25;
        assert_eq!(sparsity_penalty(&net), 0.75);
        let grad = sparsity_penalty_grad(&net);
        assert_eq!(grad[&ids[0]][0], 1.0);
        assert_eq!(grad[&ids[0]][1], -1.0);
        assert_eq!(grad[&ids[0]][2], 0.0);
    }

    #[test]
    fn sparsity_matches_flat_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = build_mini_matting_net(1.0, &mut rng).unwrap();
        let mut flat = Vec::new();
        let ids: Vec<String> = net
            .bn_ids(crate::netgraph::Scope::All)
            .iter()
            .map(|s| s.to_string())
            .collect();
        for id in &ids {
            let bn = net.bn_mut(id).unwrap();
            bn.gamma.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            flat.extend(bn.gamma.iter().map(|g| *g as f64));
        }
        let want: f64 = flat.iter().map(|g| g.abs()).sum();
        assert!((sparsity_penalty(&net) - want).abs() < 1e-9);
    }

    #[test]
    fn degenerate_weights_reduce_to_alpha_loss() {
        let b = batch(22);
        let m = KdMethod::nst();
        let net = build_mini_matting_net(0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = StageWeights {
            gt: 1.0,
            teacher: 0.0,
            sparsity: 0.0,
            kd: 0.0,
        };
        let (l, _) = pruning_stage_loss(&inputs(&b, &m), &net, &w).unwrap();
        let plain = alpha_prediction_loss(
            &AlphaTriple {
                alpha_pred: b.s.clone(),
                alpha_ref: b.gt.clone(),
                unknown_mask: b.mask.clone(),
            },
            DEFAULT_EPS_SQ,
        )
        .unwrap();
        assert_eq!(l.total, plain);
        let (l2, _) = training_stage_loss(&inputs(&b, &m), &w).unwrap();
        assert_eq!(l2.total, plain);
    }

    #[test]
    fn identical_networks_sit_at_eps_floor() {
        let mut b = batch(23);
        b.t = b.s.clone();
        b.gt = b.s.clone();
        for site in &mut b.sites {
            site.student.data = site.teacher.data.clone();
        }
        let net = build_mini_matting_net(0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for m in [KdMethod::nst(), KdMethod::spkd()] {
            let w = StageWeights {
                sparsity: 0.0,
                ..StageWeights::default()
            };
            let (l, _) = pruning_stage_loss(&inputs(&b, &m), &net, &w).unwrap();
            assert!((l.total - 1.5e-6).abs() < 1e-12, "{}", l.total);
        }
    }

    #[test]
    fn total_is_weighted_recomposition() {
        let b = batch(24);
        let net = build_mini_matting_net(0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = StageWeights {
            gt: 1.0,
            teacher: 0.5,
            sparsity: 1e-4,
            kd: 10.0,
        };
        let m = KdMethod::nst();
        let (l, _) = pruning_stage_loss(&inputs(&b, &m), &net, &w).unwrap();
        let a = |r: &Array3<f64>| {
            alpha_prediction_loss(
                &AlphaTriple {
                    alpha_pred: b.s.clone(),
                    alpha_ref: r.clone(),
                    unknown_mask: b.mask.clone(),
                },
                DEFAULT_EPS_SQ,
            )
            .unwrap()
        };
        let kd: f64 = b
            .sites
            .iter()
            .map(|s| nst_loss(&s.teacher, &s.student, 2, 0.0).unwrap())
            .sum();
        let want = a(&b.gt) + 0.5 * a(&b.t) + 1e-4 * sparsity_penalty(&net) + 10.0 * kd;
        assert!((l.total - want).abs() < 1e-6);

        let ms = KdMethod::spkd();
        let (lt, _) = training_stage_loss(&inputs(&b, &ms), &w).unwrap();
        let kd: f64 = b
            .sites
            .iter()
            .map(|s| spkd_loss(&s.teacher, &s.student, SpkdKinds::default()).unwrap())
            .sum();
        assert!((lt.total - (a(&b.gt) + 0.5 * a(&b.t) + 10.0 * kd)).abs() < 1e-6);
        assert_eq!(lt.sparsity, 0.0);
    }

    #[test]
    fn zero_features_give_zero_spkd_term() {
        let mut b = batch(25);
        for site in &mut b.sites {
            site.teacher.data.fill(0.0);
            site.student.data.fill(0.0);
        }
        let m = KdMethod::spkd();
        let (l, g) = training_stage_loss(&inputs(&b, &m), &StageWeights::default()).unwrap();
        assert_eq!(l.kd, 0.0);
        assert!(g.features.iter().all(|f| f.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn spkd_drops_channel_kind_for_narrow_students() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let site = KdSite::new(
            fm(random4((1, 4, 3, 3), &mut rng), "a", Role::Teacher),
            fm(random4((1, 2, 3, 3), &mut rng), "a", Role::Student),
        );
        let (v, _, _) = kd_site_loss(&KdMethod::spkd(), &site).unwrap();
        assert_eq!(
            v,
            spkd_loss(&site.teacher, &site.student, SpkdKinds::spatial_only()).unwrap()
        );
    }

    #[test]
    fn eta_validation() {
        let net = build_mini_matting_net(0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let enc = vec!["enc1.relu".to_string(), "enc4.relu".to_string()];
        validate_eta(&net, &enc, true).unwrap();
        let dec = vec!["dec1.relu".to_string()];
        assert!(matches!(
            validate_eta(&net, &dec, true),
            Err(Error::Config(_))
        ));
        validate_eta(&net, &dec, false).unwrap();
        assert!(matches!(
            validate_eta(&net, &["nope".to_string()], false),
            Err(Error::Config(_))
        ));
    }
}
