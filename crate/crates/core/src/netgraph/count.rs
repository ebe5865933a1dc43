use indexmap::IndexMap;

use super::{LayerKind, LayerWeights, NetworkGraph};
use crate::error::{Error, Result};

fn params_of(w: &LayerWeights) -> u64 {
    match w {
        LayerWeights::Conv(c) => (c.weight.len() + c.bias.as_ref().map_or(0, |b| b.len())) as u64,
        LayerWeights::Bn(b) => (b.gamma.len() + b.beta.len()) as u64,
    }
}

/// Learnable parameters: conv weights and biases plus BN `gamma` and `beta`.
pub fn count_params(net: &NetworkGraph) -> u64 {
    net.weights().values().map(params_of).sum()
}

/// Learnable parameters per parameterised layer.
pub fn layer_params(net: &NetworkGraph) -> IndexMap<String, u64> {
    net.weights()
        .iter()
        .map(|(id, w)| (id.clone(), params_of(w)))
        .collect()
}

/// Non-learnable BN running statistics.
pub fn count_buffers(net: &NetworkGraph) -> u64 {
    net.weights()
        .values()
        .map(|w| match w {
            LayerWeights::Bn(b) => (b.running_mean.len() + b.running_var.len()) as u64,
            LayerWeights::Conv(_) => 0,
        })
        .sum()
}

/// `(channels, height, width)` of every layer output for one input image.
pub fn infer_shapes(
    net: &NetworkGraph,
    height: usize,
    width: usize,
) -> Result<IndexMap<String, (usize, usize, usize)>> {
    let mut shapes: IndexMap<String, (usize, usize, usize)> = IndexMap::with_capacity(net.len());
    for layer in net.layers() {
        let c = net.channels_of(&layer.id).expect("validated graph");
        let shape = match &layer.kind {
            LayerKind::Input { .. } => (c, height, width),
            LayerKind::Conv {
                kernel_size,
                stride,
                padding,
                ..
            } => {
                let (_, h, w) = shapes[&layer.inputs[0]];
                if h % stride != 0 || w % stride != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{h}x{w} feature map at `{}` is not divisible by stride {stride}",
                        layer.id
                    )));
                }
                if h + 2 * padding < *kernel_size || w + 2 * padding < *kernel_size {
                    return Err(Error::InvalidArgument(format!(
                        "input too small for `{}`",
                        layer.id
                    )));
                }
                (
                    c,
                    (h + 2 * padding - kernel_size) / stride + 1,
                    (w + 2 * padding - kernel_size) / stride + 1,
                )
            }
            LayerKind::Maxpool { kernel_size } => {
                let (_, h, w) = shapes[&layer.inputs[0]];
                if h % kernel_size != 0 || w % kernel_size != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{h}x{w} feature map at `{}` is not divisible by pool size {kernel_size}",
                        layer.id
                    )));
                }
                (c, h / kernel_size, w / kernel_size)
            }
            LayerKind::Upsample { scale } => {
                let (_, h, w) = shapes[&layer.inputs[0]];
                (c, h * scale, w * scale)
            }
            LayerKind::Concat => {
                let (_, h, w) = shapes[&layer.inputs[0]];
                for src in &layer.inputs[1..] {
                    let (_, h2, w2) = shapes[src];
                    if (h2, w2) != (h, w) {
                        return Err(Error::InvalidArgument(format!(
                            "concat `{}` joins {h}x{w} with {h2}x{w2}",
                            layer.id
                        )));
                    }
                }
                (c, h, w)
            }
            LayerKind::Bn { .. } | LayerKind::Relu | LayerKind::Output => {
                let (_, h, w) = shapes[&layer.inputs[0]];
                (c, h, w)
            }
        };
        shapes.insert(layer.id.clone(), shape);
    }
    Ok(shapes)
}

/// Floating-point operations for one `height x width` image.
///
/// Convention: a conv costs `2 * k^2 * Cin * Cout * Hout * Wout` (two FLOPs
/// per multiply-accumulate) plus `Cout * Hout * Wout` for the bias when present.
/// BN, ReLU, max-pool, upsample and the output clamp cost one FLOP per output
/// element. Input and concat are free.
pub fn count_flops(net: &NetworkGraph, height: usize, width: usize) -> Result<u64> {
    let shapes = infer_shapes(net, height, width)?;
    let mut total = 0u64;
    for layer in net.layers() {
        let (c, h, w) = shapes[&layer.id];
        let elems = (c * h * w) as u64;
        total += match &layer.kind {
            LayerKind::Conv {
                in_channels,
                kernel_size,
                has_bias,
                ..
            } => {
                let macs = (kernel_size * kernel_size * in_channels) as u64 * elems;
                2 * macs + if *has_bias { elems } else { 0 }
            }
            LayerKind::Bn { .. }
            | LayerKind::Relu
            | LayerKind::Maxpool { .. }
            | LayerKind::Upsample { .. }
            | LayerKind::Output => elems,
            LayerKind::Input { .. } | LayerKind::Concat => 0,
        };
    }
    Ok(total)
}
