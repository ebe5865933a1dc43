use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{Array1, Array4, Axis};

use super::{ChannelMask, ConvWeights, LayerKind, LayerSpec, LayerWeights, NetworkGraph};
use crate::error::{Error, Result};

/// A run of consecutive channels in some layer's output that all originate
/// from the same BN layer (or from an unprunable source when `owner` is `None`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSegment {
    pub owner: Option<String>,
    pub len: usize,
}

/// The BN layer whose mask governs a conv's output filters, if any.
fn governing_bn(net: &NetworkGraph, conv_id: &str) -> Option<String> {
    net.consumers(conv_id)
        .into_iter()
        .find(|c| matches!(net.layer(c).map(|l| &l.kind), Some(LayerKind::Bn { .. })))
        .map(str::to_string)
}

/// Output channel layout of every layer, keyed by layer id.
pub fn channel_layouts(net: &NetworkGraph) -> IndexMap<String, Vec<ChannelSegment>> {
    let mut out: IndexMap<String, Vec<ChannelSegment>> = IndexMap::new();
    for layer in net.layers() {
        let segs = match &layer.kind {
            LayerKind::Input { channels } => vec![ChannelSegment {
                owner: None,
                len: *channels,
            }],
            LayerKind::Conv { out_channels, .. } => vec![ChannelSegment {
                owner: governing_bn(net, &layer.id),
                len: *out_channels,
            }],
            LayerKind::Bn { channels } => vec![ChannelSegment {
                owner: Some(layer.id.clone()),
                len: *channels,
            }],
            LayerKind::Concat => layer.inputs.iter().flat_map(|i| out[i].clone()).collect(),
            LayerKind::Relu
            | LayerKind::Maxpool { .. }
            | LayerKind::Upsample { .. }
            | LayerKind::Output => out[&layer.inputs[0]].clone(),
        };
        out.insert(layer.id.clone(), segs);
    }
    out
}

fn kept_indices(segments: &[ChannelSegment], masks: &HashMap<&str, &ChannelMask>) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut base = 0;
    for seg in segments {
        match seg.owner.as_deref().and_then(|o| masks.get(o)) {
            Some(mask) => kept.extend(mask.kept_indices().into_iter().map(|i| base + i)),
            None => kept.extend(base..base + seg.len),
        }
        base += seg.len;
    }
    kept
}

fn select1(v: &Array1<f32>, idx: &[usize]) -> Array1<f32> {
    v.select(Axis(0), idx)
}

/// Removes every channel whose mask entry is `false`: BN vectors and the
/// producing conv's filters are row-filtered, and each consuming conv drops the
/// matching input columns, resolved through concat offsets. Returns a new graph.
pub fn apply_structural_prune(net: &NetworkGraph, masks: &[ChannelMask]) -> Result<NetworkGraph> {
    let mut by_id: HashMap<&str, &ChannelMask> = HashMap::new();
    for m in masks {
        let bn = net.bn(&m.bn_id).ok_or_else(|| {
            Error::Shape(format!(
                "mask refers to `{}`, which is not a BN layer",
                m.bn_id
            ))
        })?;
        if bn.channels() != m.keep.len() {
            return Err(Error::Shape(format!(
                "mask for `{}` has {} entries, layer has {} channels",
                m.bn_id,
                m.keep.len(),
                bn.channels()
            )));
        }
        if m.kept() == 0 {
            return Err(Error::Invariant(format!(
                "mask empties layer `{}`",
                m.bn_id
            )));
        }
        if by_id.insert(m.bn_id.as_str(), m).is_some() {
            return Err(Error::Shape(format!("duplicate mask for `{}`", m.bn_id)));
        }
    }

    let layouts = channel_layouts(net);
    let kept: HashMap<&str, Vec<usize>> = layouts
        .iter()
        .map(|(id, segs)| (id.as_str(), kept_indices(segs, &by_id)))
        .collect();

    let mut layers: Vec<LayerSpec> = Vec::with_capacity(net.len());
    let mut weights: IndexMap<String, LayerWeights> = IndexMap::new();
    for layer in net.layers() {
        let mut spec = layer.clone();
        let out_idx = &kept[layer.id.as_str()];
        match &mut spec.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                ..
            } => {
                let in_idx = &kept[layer.inputs[0].as_str()];
                let w = net.conv(&layer.id).expect("validated conv has weights");
                let weight: Array4<f32> = w
                    .weight
                    .select(Axis(0), out_idx)
                    .select(Axis(1), in_idx)
                    .as_standard_layout()
                    .into_owned();
                let bias = w.bias.as_ref().map(|b| select1(b, out_idx));
                *in_channels = in_idx.len();
                *out_channels = out_idx.len();
                weights.insert(
                    layer.id.clone(),
                    LayerWeights::Conv(ConvWeights { weight, bias }),
                );
            }
            LayerKind::Bn { channels } => {
                let p = net.bn(&layer.id).expect("validated bn has parameters");
                let mut q = p.clone();
                q.gamma = select1(&p.gamma, out_idx);
                q.beta = select1(&p.beta, out_idx);
                q.running_mean = select1(&p.running_mean, out_idx);
                q.running_var = select1(&p.running_var, out_idx);
                *channels = out_idx.len();
                weights.insert(layer.id.clone(), LayerWeights::Bn(q));
            }
            _ => {}
        }
        layers.push(spec);
    }
    let pruned = NetworkGraph::new(layers, weights)
        .map_err(|e| Error::Invariant(format!("rewrite produced an invalid graph: {e}")))?;
    for (id, c) in pruned.channel_counts() {
        if *c == 0 {
            return Err(Error::Invariant(format!("layer `{id}` lost all channels")));
        }
    }
    Ok(pruned)
}
