use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{NetworkGraph, Scope};
use crate::error::{Error, Result};

/// Default fraction of each layer's channels that survives any pruning.
pub const DEFAULT_MIN_KEEP_FRACTION: f64 = 0.1;

/// `max(1, ceil(fraction * channels))`
pub fn min_keep(channels: usize, fraction: f64) -> usize {
    ((fraction * channels as f64).ceil() as usize).max(1)
}

/// One BN channel's scaling-factor magnitude with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEntry {
    pub bn_id: String,
    pub channel: usize,
    pub magnitude: f64,
}

/// Keep/drop decision for every channel of one BN layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub bn_id: String,
    pub keep: Vec<bool>,
}

impl ChannelMask {
    pub fn all(bn_id: &str, channels: usize) -> Self {
        Self {
            bn_id: bn_id.to_string(),
            keep: vec![true; channels],
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn dropped(&self) -> usize {
        self.keep.len() - self.kept()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `|gamma|` of every BN channel in `scope`, in topological then channel order.
pub fn collect_bn_gammas(net: &NetworkGraph, scope: Scope) -> Result<Vec<GammaEntry>> {
    let ids = net.bn_ids(scope);
    if ids.is_empty() {
        return Err(Error::EmptyScope(scope.name().to_string()));
    }
    let mut out = Vec::new();
    for id in ids {
        let bn = net.bn(id).expect("validated bn has parameters");
        out.extend(bn.gamma.iter().enumerate().map(|(channel, g)| GammaEntry {
            bn_id: id.to_string(),
            channel,
            magnitude: (*g as f64).abs(),
        }));
    }
    Ok(out)
}

/// Masks plus the bookkeeping needed for an audit trail.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    pub masks: Vec<ChannelMask>,
    /// The M-th smallest magnitude, `None` when nothing is dropped.
    pub threshold: Option<f64>,
    /// Channels dropped by the threshold and restored by the per-layer floor.
    pub readmitted: Vec<(String, usize)>,
}

/// Drops exactly `m` channels with the smallest magnitudes, ties resolved by
/// position in `gammas`, then restores the largest dropped channels of any
/// layer that would fall below its [`min_keep`] floor.
pub fn select_channels(
    gammas: &[GammaEntry],
    m: usize,
    min_keep_fraction: f64,
) -> Result<MaskSelection> {
    if m >= gammas.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot drop {m} of {} channels",
            gammas.len()
        )));
    }
    // Layer order of first appearance.
    let mut layer_order: Vec<&str> = Vec::new();
    let mut layer_len: HashMap<&str, usize> = HashMap::new();
    for g in gammas {
        let len = layer_len.entry(g.bn_id.as_str()).or_insert_with(|| {
            layer_order.push(g.bn_id.as_str());
            0
        });
        *len = (*len).max(g.channel + 1);
    }

    let mut order: Vec<usize> = (0..gammas.len()).collect();
    // Stable sort keeps sequence order among equal magnitudes.
    order.sort_by(|&a, &b| gammas[a].magnitude.total_cmp(&gammas[b].magnitude));
    let threshold = (m > 0).then(|| gammas[order[m - 1]].magnitude);

    let mut keep: HashMap<&str, Vec<bool>> = layer_order
        .iter()
        .map(|&id| (id, vec![true; layer_len[id]]))
        .collect();
    for &i in &order[..m] {
        keep.get_mut(gammas[i].bn_id.as_str()).unwrap()[gammas[i].channel] = false;
    }

    let mut readmitted = Vec::new();
    for &id in &layer_order {
        let mask = keep.get_mut(id).unwrap();
        let floor = min_keep(mask.len(), min_keep_fraction);
        let kept = mask.iter().filter(|&&k| k).count();
        if kept >= floor {
            continue;
        }
        let mut dropped: Vec<&GammaEntry> = gammas
            .iter()
            .filter(|g| g.bn_id == id && !mask[g.channel])
            .collect();
        dropped.sort_by(|a, b| {
            b.magnitude
                .total_cmp(&a.magnitude)
                .then(a.channel.cmp(&b.channel))
        });
        for g in dropped.into_iter().take(floor - kept) {
            mask[g.channel] = true;
            readmitted.push((id.to_string(), g.channel));
        }
    }

    let masks = layer_order
        .iter()
        .map(|&id| ChannelMask {
            bn_id: id.to_string(),
            keep: keep.remove(id).unwrap(),
        })
        .collect();
    Ok(MaskSelection {
        masks,
        threshold,
        readmitted,
    })
}

/// Channel masks for dropping the `m` smallest-magnitude channels, with the
/// default per-layer floor.
pub fn derive_channel_masks(gammas: &[GammaEntry], m: usize) -> Result<Vec<ChannelMask>> {
    Ok(select_channels(gammas, m, DEFAULT_MIN_KEEP_FRACTION)?.masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_mini_matting_net, GraphBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entries(layer: &str, mags: &[f64]) -> Vec<GammaEntry> {
        mags.iter()
            .enumerate()
            .map(|(channel, &magnitude)| GammaEntry {
                bn_id: layer.into(),
                channel,
                magnitude,
            })
            .collect()
    }

    #[test]
    fn collect_takes_absolute_values() {
        let mut b = GraphBuilder::new();
        b.input("in", 2)
            .conv("c", "in", 3, 1, 1, 0, false)
            .bn("bn1", "c")
            .output("out", "bn1");
        let mut net = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.bn_mut("bn1").unwrap().gamma = ndarray::arr1(&[0.5, -0.01, 0.3]);
        let g = collect_bn_gammas(&net, Scope::All).unwrap();
        let mags: Vec<f64> = g.iter().map(|e| e.magnitude).collect();
        assert_eq!(
            g.iter().map(|e| e.channel).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(
            (mags[0] - 0.5).abs() < 1e-7
                && (mags[1] - 0.01).abs() < 1e-7
                && (mags[2] - 0.3).abs() < 1e-7
        );

        net.bn_mut("bn1").unwrap().gamma.fill(0.0);
        assert!(collect_bn_gammas(&net, Scope::All)
            .unwrap()
            .iter()
            .all(|e| e.magnitude == 0.0));
        assert!(matches!(
            collect_bn_gammas(&net, Scope::Decoder),
            Err(Error::EmptyScope(_))
        ));
    }

    #[test]
    fn encoder_scope_has_240_entries() {
        let net = build_mini_matting_net(1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(collect_bn_gammas(&net, Scope::Encoder).unwrap().len(), 240);
    }

    #[test]
    fn drops_two_smallest() {
        let g = entries("bn", &[0.5, 0.01, 0.3, 0.02]);
        let sel = select_channels(&g, 2, 0.1).unwrap();
        assert_eq!(sel.masks[0].keep, vec![true, false, true, false]);
        assert_eq!(sel.threshold, Some(0.02));
        assert!(sel.readmitted.is_empty());
    }

    #[test]
    fn m_zero_keeps_everything() {
        let g = entries("bn", &[0.0, 0.0, 1.0]);
        let masks = derive_channel_masks(&g, 0).unwrap();
        assert!(masks[0].keep.iter().all(|&k| k));
    }

    #[test]
    fn m_too_large_is_rejected() {
        let g = entries("bn", &[0.1, 0.2]);
        assert!(matches!(
            derive_channel_masks(&g, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ties_resolved_by_position() {
        let mut g = entries("a", &[0.1, 0.1]);
        g.extend(entries("b", &[0.1, 0.1, 0.9]));
        let sel = select_channels(&g, 3, 0.0).unwrap();
        // floor is still 1 channel per layer, so layer `a` gets one back.
        assert_eq!(sel.masks[0].keep, vec![true, false]);
        assert_eq!(sel.readmitted, vec![("a".to_string(), 0)]);
        assert_eq!(sel.masks[1].keep, vec![false, true, true]);
    }

    #[test]
    fn floor_readmits_largest_dropped() {
        let mut g = entries("a", &[0.01, 0.03, 0.02, 0.04]);
        g.extend(entries("b", &[1.0, 2.0]));
        let sel = select_channels(&g, 4, 0.5).unwrap();
        // floor for `a` is 2: channels 3 (0.04) and 1 (0.03) come back.
        assert_eq!(sel.masks[0].keep, vec![false, true, false, true]);
        assert_eq!(sel.readmitted.len(), 2);
    }
}
