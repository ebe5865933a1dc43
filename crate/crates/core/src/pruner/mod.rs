//! Channel selection from BN scaling factors and the pruning stage.

mod stage;

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{
    apply_structural_prune, collect_bn_gammas, count_flops, count_params, layer_params,
    select_channels, ChannelMask, LevelTag, NetworkGraph, Scope, StageTag,
};

pub use stage::{run_prune_stage, PruneEpoch, PruneLog, NEAR_ZERO_GAMMA};

/// Upper bin edges of the `|gamma|` histograms; the last bin is open.
pub const HISTOGRAM_EDGES: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneStat {
    pub bn_id: String,
    pub stage: StageTag,
    pub before: usize,
    pub kept: usize,
    pub dropped: usize,
    pub readmitted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub ratio: f64,
    pub input_size: (usize, usize),
    pub m_enc: usize,
    pub m_dec: usize,
    /// M-th smallest encoder `|gamma|`, `None` when nothing is dropped.
    pub tau_enc: Option<f64>,
    pub tau_dec: Option<f64>,
    pub layers: Vec<LayerPruneStat>,
    /// Channels restored by the per-layer floor.
    pub readmitted: Vec<(String, usize)>,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// Parameters removed from each parameterised layer.
    pub removed_params: IndexMap<String, u64>,
    /// Counts per bin of [`HISTOGRAM_EDGES`], before pruning.
    pub gamma_histogram_enc: Vec<usize>,
    pub gamma_histogram_dec: Vec<usize>,
}

pub fn gamma_histogram(net: &NetworkGraph, scope: Scope) -> Vec<usize> {
    let mut counts = vec![0; HISTOGRAM_EDGES.len() + 1];
    for id in net.bn_ids(scope) {
        for g in net.bn(id).unwrap().gamma.iter() {
            let a = (*g as f64).abs();
            let bin = HISTOGRAM_EDGES
                .iter()
                .position(|e| a < *e)
                .unwrap_or(HISTOGRAM_EDGES.len());
            counts[bin] += 1;
        }
    }
    counts
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "pruning ratio must lie in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

fn build_report(
    before: &NetworkGraph,
    after: &NetworkGraph,
    masks: &[ChannelMask],
    input_size: (usize, usize),
) -> Result<PruneReport> {
    let layers = masks
        .iter()
        .map(|m| LayerPruneStat {
            bn_id: m.bn_id.clone(),
            stage: before.layer(&m.bn_id).unwrap().stage,
            before: m.keep.len(),
            kept: m.kept(),
            dropped: m.dropped(),
            readmitted: 0,
        })
        .collect();
    let pa = layer_params(after);
    let removed_params = layer_params(before)
        .into_iter()
        .map(|(id, p)| {
            let q = pa.get(&id).copied().unwrap_or(0);
            (id, p - q)
        })
        .collect();
    let (h, w) = input_size;
    Ok(PruneReport {
        ratio: 0.0,
        input_size,
        m_enc: 0,
        m_dec: 0,
        tau_enc: None,
        tau_dec: None,
        layers,
        readmitted: Vec::new(),
        params_before: count_params(before),
        params_after: count_params(after),
        flops_before: count_flops(before, h, w)?,
        flops_after: count_flops(after, h, w)?,
        removed_params,
        gamma_histogram_enc: gamma_histogram(before, Scope::Encoder),
        gamma_histogram_dec: gamma_histogram(before, Scope::Decoder),
    })
}

/// Removes `floor(ratio * C)` channels of the encoder and, separately, of the
/// decoder, choosing the smallest `|gamma|` within each scope.
pub fn prune_student(
    student: &NetworkGraph,
    ratio: f64,
    min_keep_fraction: f64,
    input_size: (usize, usize),
) -> Result<(NetworkGraph, PruneReport)> {
    check_ratio(ratio)?;
    let mut masks = Vec::new();
    let mut readmitted = Vec::new();
    let mut ms = [0; 2];
    let mut taus = [None; 2];
    for (k, scope) in [Scope::Encoder, Scope::Decoder].into_iter().enumerate() {
        let gammas = collect_bn_gammas(student, scope)?;
        let m = (ratio * gammas.len() as f64).floor() as usize;
        let sel = select_channels(&gammas, m, min_keep_fraction)?;
        ms[k] = m;
        taus[k] = sel.threshold;
        masks.extend(sel.masks);
        readmitted.extend(sel.readmitted);
    }
    let pruned = apply_structural_prune(student, &masks)?;
    let mut report = build_report(student, &pruned, &masks, input_size)?;
    for stat in &mut report.layers {
        stat.readmitted = readmitted
            .iter()
            .filter(|(id, _)| *id == stat.bn_id)
            .count();
    }
    report.ratio = ratio;
    report.m_enc = ms[0];
    report.m_dec = ms[1];
    report.tau_enc = taus[0];
    report.tau_dec = taus[1];
    report.readmitted = readmitted;
    Ok((pruned, report))
}

/// Layers touched by [`uniform_prune`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UniformScope {
    /// Every BN layer of encoder and decoder.
    All,
    /// Low-level encoder layers.
    Low,
    /// High-level encoder layers.
    High,
}

impl UniformScope {
    fn selects(self, stage: StageTag, level: LevelTag) -> bool {
        match self {
            UniformScope::All => true,
            UniformScope::Low => stage == StageTag::Encoder && level == LevelTag::Low,
            UniformScope::High => stage == StageTag::Encoder && level == LevelTag::High,
        }
    }
}

/// Per-layer masks dropping `floor(ratio * C)` channels of every selected
/// layer: smallest `|gamma|` first, and among equal magnitudes the highest
/// channel index first.
pub fn uniform_masks(
    net: &NetworkGraph,
    ratio: f64,
    scope: UniformScope,
) -> Result<Vec<ChannelMask>> {
    check_ratio(ratio)?;
    let mut masks = Vec::new();
    for id in net.bn_ids(Scope::All) {
        let layer = net.layer(id).unwrap();
        let gamma = &net.bn(id).unwrap().gamma;
        let c = gamma.len();
        let mut mask = ChannelMask::all(id, c);
        if scope.selects(layer.stage, layer.level) {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| gamma[a].abs().total_cmp(&gamma[b].abs()).then(b.cmp(&a)));
            for &ch in &order[..(ratio * c as f64).floor() as usize] {
                mask.keep[ch] = false;
            }
        }
        masks.push(mask);
    }
    Ok(masks)
}

pub fn uniform_prune(net: &NetworkGraph, ratio: f64, scope: UniformScope) -> Result<NetworkGraph> {
    apply_structural_prune(net, &uniform_masks(net, ratio, scope)?)
}

/// [`uniform_prune`] with the same audit as [`prune_student`].
pub fn uniform_prune_report(
    net: &NetworkGraph,
    ratio: f64,
    scope: UniformScope,
    input_size: (usize, usize),
) -> Result<(NetworkGraph, PruneReport)> {
    let masks = uniform_masks(net, ratio, scope)?;
    let pruned = apply_structural_prune(net, &masks)?;
    let mut report = build_report(net, &pruned, &masks, input_size)?;
    report.ratio = ratio;
    for stat in &report.layers {
        match stat.stage {
            StageTag::Encoder => report.m_enc += stat.dropped,
            StageTag::Decoder => report.m_dec += stat.dropped,
        }
    }
    Ok((pruned, report))
}

impl PruneReport {
    pub fn dropped_total(&self) -> usize {
        self.layers.iter().map(|l| l.dropped).sum()
    }

    pub fn to_markdown(&self) -> String {
        let fmt_tau = |t: Option<f64>| t.map_or("n/a".to_string(), |t| format!("{t:.6e}"));
        let mut s = String::new();
        let _ = writeln!(s, "# Prune report\n");
        let _ = writeln!(s, "- ratio: {}", self.ratio);
        let _ = writeln!(
            s,
            "- encoder: M = {}, tau = {}",
            self.m_enc,
            fmt_tau(self.tau_enc)
        );
        let _ = writeln!(
            s,
            "- decoder: M = {}, tau = {}",
            self.m_dec,
            fmt_tau(self.tau_dec)
        );
        let _ = writeln!(
            s,
            "- params: {} -> {}",
            self.params_before, self.params_after
        );
        let _ = writeln!(
            s,
            "- FLOPs at {}x{}: {} -> {}",
            self.input_size.0, self.input_size.1, self.flops_before, self.flops_after
        );
        let _ = writeln!(
            s,
            "- re-admitted by the per-layer floor: {}",
            self.readmitted.len()
        );
        let _ = writeln!(
            s,
            "\n| layer | stage | before | kept | dropped | re-admitted |"
        );
        let _ = writeln!(s, "|---|---|---:|---:|---:|---:|");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "| {} | {:?} | {} | {} | {} | {} |",
                l.bn_id, l.stage, l.before, l.kept, l.dropped, l.readmitted
            );
        }
        let _ = writeln!(s, "\n| abs(gamma) below | encoder | decoder |");
        let _ = writeln!(s, "|---|---:|---:|");
        for (i, (e, d)) in self
            .gamma_histogram_enc
            .iter()
            .zip(&self.gamma_histogram_dec)
            .enumerate()
        {
            let edge = HISTOGRAM_EDGES
                .get(i)
                .map_or("inf".to_string(), |e| format!("{e:e}"));
            let _ = writeln!(s, "| {edge} | {e} | {d} |");
        }
        s
    }

    /// One CSV row per BN layer.
    pub fn layers_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.layers {
            w.serialize(l)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Invariant(e.to_string()))
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("upper_edge,encoder,decoder\n");
        for (i, (e, d)) in self
            .gamma_histogram_enc
            .iter()
            .zip(&self.gamma_histogram_dec)
            .enumerate()
        {
            let edge = HISTOGRAM_EDGES
                .get(i)
                .map_or("inf".to_string(), |e| format!("{e:e}"));
            let _ = writeln!(s, "{edge},{e},{d}");
        }
        s
    }
}
