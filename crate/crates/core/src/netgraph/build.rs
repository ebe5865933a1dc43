use rand::Rng;

use super::{LayerKind, LayerSpec, LevelTag, NetworkGraph, StageTag};
use crate::error::{Error, Result};

/// Encoder widths at multiplier 1; the decoder mirrors them in reverse.
pub const BASE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Input planes: RGB plus the trimap.
pub const INPUT_CHANNELS: usize = 4;

/// Incremental builder that tracks channel counts so conv input widths
/// never have to be spelled out by hand.
#[derive(Debug)]
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    channels: Vec<usize>,
    stage: StageTag,
    level: LevelTag,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self {
            layers: Vec::new(),
            channels: Vec::new(),
            stage: StageTag::Encoder,
            level: LevelTag::Low,
        }
    }

    /// Tags applied to every layer added from now on.
    pub fn tags(&mut self, stage: StageTag, level: LevelTag) -> &mut Self {
        self.stage = stage;
        self.level = level;
        self
    }

    fn channels_of(&self, id: &str) -> usize {
        let idx = self
            .layers
            .iter()
            .position(|l| l.id == id)
            .unwrap_or_else(|| panic!("GraphBuilder: unknown layer `{id}`"));
        self.channels[idx]
    }

    fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str], out: usize) -> &mut Self {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            stage: self.stage,
            level: self.level,
        });
        self.channels.push(out);
        self
    }

    pub fn input(&mut self, id: &str, channels: usize) -> &mut Self {
        self.push(id, LayerKind::Input { channels }, &[], channels)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        from: &str,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    ) -> &mut Self {
        let in_channels = self.channels_of(from);
        self.push(
            id,
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
                has_bias,
            },
            &[from],
            out_channels,
        )
    }

    pub fn bn(&mut self, id: &str, from: &str) -> &mut Self {
        let channels = self.channels_of(from);
        self.push(id, LayerKind::Bn { channels }, &[from], channels)
    }

    pub fn relu(&mut self, id: &str, from: &str) -> &mut Self {
        let c = self.channels_of(from);
        self.push(id, LayerKind::Relu, &[from], c)
    }

    pub fn maxpool(&mut self, id: &str, from: &str, kernel_size: usize) -> &mut Self {
        let c = self.channels_of(from);
        self.push(id, LayerKind::Maxpool { kernel_size }, &[from], c)
    }

    pub fn upsample(&mut self, id: &str, from: &str, scale: usize) -> &mut Self {
        let c = self.channels_of(from);
        self.push(id, LayerKind::Upsample { scale }, &[from], c)
    }

    pub fn concat(&mut self, id: &str, from: &[&str]) -> &mut Self {
        let c = from.iter().map(|f| self.channels_of(f)).sum();
        self.push(id, LayerKind::Concat, from, c)
    }

    pub fn output(&mut self, id: &str, from: &str) -> &mut Self {
        let c = self.channels_of(from);
        self.push(id, LayerKind::Output, &[from], c)
    }

    /// conv(3x3, pad 1) -> bn -> relu, named `<prefix>.conv|bn|relu`.
    pub fn conv_bn_relu(
        &mut self,
        prefix: &str,
        from: &str,
        out_channels: usize,
        stride: usize,
    ) -> &mut Self {
        let conv = format!("{prefix}.conv");
        let bn = format!("{prefix}.bn");
        let relu = format!("{prefix}.relu");
        self.conv(&conv, from, out_channels, 3, stride, 1, false)
            .bn(&bn, &conv)
            .relu(&relu, &bn)
    }

    pub fn into_layers(self) -> Vec<LayerSpec> {
        self.layers
    }

    pub fn build<R: Rng + ?Sized>(self, rng: &mut R) -> Result<NetworkGraph> {
        NetworkGraph::with_random_weights(self.layers, rng)
    }
}

fn scaled_width(base: usize, multiplier: f64) -> usize {
    ((base as f64 * multiplier).round() as usize).max(1)
}

/// Layer list of the mini U-shaped matting network.
///
/// Encoder stage `i` is a stride-2 conv-BN-ReLU; decoder stage `j`
/// upsamples the previous stage, concatenates `(skip, upsampled)` and applies
/// conv-BN-ReLU. The last decoder stage concatenates the raw input as its skip.
/// A biased 3x3 conv to one channel feeds the clamping output layer.
pub fn mini_matting_layers(width_multiplier: f64) -> Result<Vec<LayerSpec>> {
    if !(width_multiplier > 0.0 && width_multiplier <= 4.0) {
        return Err(Error::InvalidArgument(format!(
            "width multiplier must lie in (0, 4], got {width_multiplier}"
        )));
    }
    let widths: Vec<usize> = BASE_WIDTHS
        .iter()
        .map(|&b| scaled_width(b, width_multiplier))
        .collect();
    let level = |stage: usize| {
        if stage < 2 {
            LevelTag::Low
        } else {
            LevelTag::High
        }
    };

    let mut b = GraphBuilder::new();
    b.tags(StageTag::Encoder, LevelTag::Low)
        .input("input", INPUT_CHANNELS);
    let mut prev = "input".to_string();
    let mut skips = vec!["input".to_string()];
    for (i, &w) in widths.iter().enumerate() {
        let prefix = format!("enc{}", i + 1);
        b.tags(StageTag::Encoder, level(i))
            .conv_bn_relu(&prefix, &prev, w, 2);
        prev = format!("{prefix}.relu");
        skips.push(prev.clone());
    }
    // skips = [input, enc1, enc2, enc3, enc4]; the deepest one is `prev`.
    skips.pop();
    for (j, &w) in widths.iter().rev().enumerate() {
        let prefix = format!("dec{}", j + 1);
        let skip = skips.pop().expect("one skip per decoder stage");
        let up = format!("{prefix}.up");
        let cat = format!("{prefix}.cat");
        // Decoder stage j mirrors encoder stage (4 - j).
        b.tags(StageTag::Decoder, level(widths.len() - 1 - j))
            .upsample(&up, &prev, 2)
            .concat(&cat, &[&skip, &up])
            .conv_bn_relu(&prefix, &cat, w, 1);
        prev = format!("{prefix}.relu");
    }
    b.tags(StageTag::Decoder, LevelTag::Low)
        .conv("head.conv", &prev, 1, 3, 1, 1, true)
        .output("alpha", "head.conv");
    Ok(b.into_layers())
}

/// The mini matting network with freshly initialised weights.
pub fn build_mini_matting_net<R: Rng + ?Sized>(
    width_multiplier: f64,
    rng: &mut R,
) -> Result<NetworkGraph> {
    NetworkGraph::with_random_weights(mini_matting_layers(width_multiplier)?, rng)
}
