//! Declarative layer DAG for small convolutional matting networks.
//!
//! A [`NetworkGraph`] is a topologically ordered list of [`LayerSpec`]s plus
//! the parameter tensors of the layers that own any. Graphs are validated on
//! construction and never mutated by rewrites: pruning returns a new graph.
//! Training code updates parameters in place through [`NetworkGraph::weights_mut`],
//! which cannot change any shape.

mod build;
mod count;
mod io;
mod masks;
mod rewrite;

use indexmap::IndexMap;
use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use build::{
    build_mini_matting_net, mini_matting_layers, GraphBuilder, BASE_WIDTHS, INPUT_CHANNELS,
};
pub use count::{count_buffers, count_flops, count_params, infer_shapes, layer_params};
pub use io::{load_checkpoint, save_checkpoint, GraphDocument, GRAPH_SCHEMA};
pub use masks::{
    collect_bn_gammas, derive_channel_masks, min_keep, select_channels, ChannelMask, GammaEntry,
    MaskSelection, DEFAULT_MIN_KEEP_FRACTION,
};
pub use rewrite::{apply_structural_prune, channel_layouts, ChannelSegment};

/// Encoder/decoder membership of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Encoder,
    Decoder,
}

/// Feature-level membership used by the low/high uniform pruning experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelTag {
    Low,
    High,
}

/// Selection of BN layers by stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Encoder,
    Decoder,
    All,
}

impl Scope {
    pub fn contains(self, stage: StageTag) -> bool {
        match self {
            Scope::All => true,
            Scope::Encoder => stage == StageTag::Encoder,
            Scope::Decoder => stage == StageTag::Decoder,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scope::Encoder => "encoder",
            Scope::Decoder => "decoder",
            Scope::All => "all",
        }
    }
}

/// Kind-specific layer parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Bn {
        channels: usize,
    },
    Relu,
    Maxpool {
        kernel_size: usize,
    },
    Upsample {
        scale: usize,
    },
    Concat,
    /// Network output: clamps to [0, 1].
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Bn { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Concat => "concat",
            LayerKind::Output => "output",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub stage: StageTag,
    pub level: LevelTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
}

/// Affine and running-statistic parameters of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return Err(Error::Shape(format!(
                "batch-norm vectors disagree in length (gamma {}, beta {}, mean {}, var {})",
                n,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidGraph(
                "running_var must be non-negative".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidGraph(
                "batch-norm epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    Conv(ConvWeights),
    Bn(BatchNormParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    layers: IndexMap<String, LayerSpec>,
    weights: IndexMap<String, LayerWeights>,
    channel_counts: IndexMap<String, usize>,
}

impl NetworkGraph {
    /// Validates `layers` (which must be listed in topological order) and
    /// attaches `weights`.
    pub fn new(layers: Vec<LayerSpec>, weights: IndexMap<String, LayerWeights>) -> Result<Self> {
        let mut map = IndexMap::with_capacity(layers.len());
        for layer in layers {
            let id = layer.id.clone();
            if map.insert(id.clone(), layer).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate layer id `{id}`")));
            }
        }
        let channel_counts = validate_layers(&map)?;
        let graph = Self {
            layers: map,
            weights,
            channel_counts,
        };
        graph.validate_weights()?;
        Ok(graph)
    }

    /// Builds a graph with freshly initialised parameters: He-normal conv
    /// weights, zero biases (0.5 for a conv feeding the output layer) and unit
    /// BN scales.
    pub fn with_random_weights<R: Rng + ?Sized>(
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut weights = IndexMap::new();
        let feeds_output: Vec<String> = layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Output))
            .flat_map(|l| l.inputs.clone())
            .collect();
        for layer in &layers {
            match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel_size,
                    has_bias,
                    ..
                } => {
                    let w = he_normal(out_channels, in_channels, kernel_size, rng);
                    let bias = has_bias.then(|| {
                        let fill = if feeds_output.contains(&layer.id) {
                            0.5
                        } else {
                            0.0
                        };
                        Array1::from_elem(out_channels, fill)
                    });
                    weights.insert(
                        layer.id.clone(),
                        LayerWeights::Conv(ConvWeights { weight: w, bias }),
                    );
                }
                LayerKind::Bn { channels } => {
                    weights.insert(
                        layer.id.clone(),
                        LayerWeights::Bn(BatchNormParams::new(channels)),
                    );
                }
                _ => {}
            }
        }
        Self::new(layers, weights)
    }

    /// A copy of this graph's architecture with fresh random weights.
    pub fn reinitialized<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        Self::with_random_weights(self.layers.values().cloned().collect(), rng)
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.values()
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.get(id)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.get_index_of(id)
    }

    pub fn layer_at(&self, index: usize) -> &LayerSpec {
        &self.layers[index]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn weights(&self) -> &IndexMap<String, LayerWeights> {
        &self.weights
    }

    /// Mutable parameter access for optimisers. Shapes must not change.
    pub fn weights_mut(&mut self) -> &mut IndexMap<String, LayerWeights> {
        &mut self.weights
    }

    pub fn conv(&self, id: &str) -> Option<&ConvWeights> {
        match self.weights.get(id) {
            Some(LayerWeights::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn bn(&self, id: &str) -> Option<&BatchNormParams> {
        match self.weights.get(id) {
            Some(LayerWeights::Bn(b)) => Some(b),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, id: &str) -> Option<&mut BatchNormParams> {
        match self.weights.get_mut(id) {
            Some(LayerWeights::Bn(b)) => Some(b),
            _ => None,
        }
    }

    pub fn channel_counts(&self) -> &IndexMap<String, usize> {
        &self.channel_counts
    }

    pub fn channels_of(&self, id: &str) -> Option<usize> {
        self.channel_counts.get(id).copied()
    }

    /// BN layer ids in topological order.
    pub fn bn_ids(&self, scope: Scope) -> Vec<&str> {
        self.layers
            .values()
            .filter(|l| matches!(l.kind, LayerKind::Bn { .. }) && scope.contains(l.stage))
            .map(|l| l.id.as_str())
            .collect()
    }

    pub fn input_id(&self) -> &str {
        self.layers
            .values()
            .find(|l| matches!(l.kind, LayerKind::Input { .. }))
            .map(|l| l.id.as_str())
            .expect("validated graph has an input layer")
    }

    pub fn output_id(&self) -> &str {
        self.layers
            .values()
            .find(|l| matches!(l.kind, LayerKind::Output))
            .map(|l| l.id.as_str())
            .expect("validated graph has an output layer")
    }

    /// Ids of layers that list `id` among their inputs.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.layers
            .values()
            .filter(|l| l.inputs.iter().any(|i| i == id))
            .map(|l| l.id.as_str())
            .collect()
    }

    /// True when both graphs have the same layers with the same shapes.
    pub fn same_architecture(&self, other: &NetworkGraph) -> bool {
        self.layers == other.layers
    }

    /// Re-runs every structural and shape check.
    pub fn validate(&self) -> Result<()> {
        let counts = validate_layers(&self.layers)?;
        if counts != self.channel_counts {
            return Err(Error::InvalidGraph("stale channel counts".into()));
        }
        self.validate_weights()
    }

    fn validate_weights(&self) -> Result<()> {
        for layer in self.layers.values() {
            match (&layer.kind, self.weights.get(&layer.id)) {
                (
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel_size,
                        has_bias,
                        ..
                    },
                    Some(LayerWeights::Conv(w)),
                ) => {
                    let expect = [*out_channels, *in_channels, *kernel_size, *kernel_size];
                    if w.weight.shape() != expect {
                        return Err(Error::Shape(format!(
                            "conv `{}` weight shape {:?}, expected {:?}",
                            layer.id,
                            w.weight.shape(),
                            expect
                        )));
                    }
                    match (&w.bias, has_bias) {
                        (Some(b), true) if b.len() == *out_channels => {}
                        (None, false) => {}
                        _ => {
                            return Err(Error::Shape(format!(
                                "conv `{}` bias does not match spec",
                                layer.id
                            )))
                        }
                    }
                }
                (LayerKind::Bn { channels }, Some(LayerWeights::Bn(p))) => {
                    p.validate()?;
                    if p.channels() != *channels {
                        return Err(Error::Shape(format!(
                            "bn `{}` has {} parameters, spec says {}",
                            layer.id,
                            p.channels(),
                            channels
                        )));
                    }
                }
                (LayerKind::Conv { .. } | LayerKind::Bn { .. }, _) => {
                    return Err(Error::InvalidGraph(format!(
                        "missing parameters for `{}`",
                        layer.id
                    )));
                }
                (_, Some(_)) => {
                    return Err(Error::InvalidGraph(format!(
                        "unexpected parameters for `{}`",
                        layer.id
                    )));
                }
                _ => {}
            }
        }
        if let Some(extra) = self.weights.keys().find(|k| !self.layers.contains_key(*k)) {
            return Err(Error::InvalidGraph(format!(
                "parameters for unknown layer `{extra}`"
            )));
        }
        Ok(())
    }
}

/// Checks the structural invariants and returns live output channels per layer.
fn validate_layers(layers: &IndexMap<String, LayerSpec>) -> Result<IndexMap<String, usize>> {
    let mut counts: IndexMap<String, usize> = IndexMap::with_capacity(layers.len());
    let mut n_inputs = 0;
    let mut n_outputs = 0;
    for layer in layers.values() {
        let mut in_counts = Vec::with_capacity(layer.inputs.len());
        for src in &layer.inputs {
            // Every input must already be defined, which also rules out cycles.
            match counts.get(src) {
                Some(&c) => in_counts.push(c),
                None => {
                    return Err(Error::InvalidGraph(format!(
                        "layer `{}` reads `{}` which is not defined earlier",
                        layer.id, src
                    )))
                }
            }
        }
        let expect_inputs = |n: usize| -> Result<()> {
            if layer.inputs.len() != n {
                return Err(Error::InvalidGraph(format!(
                    "{} layer `{}` needs {} input(s), has {}",
                    layer.kind.name(),
                    layer.id,
                    n,
                    layer.inputs.len()
                )));
            }
            Ok(())
        };
        let out = match &layer.kind {
            LayerKind::Input { channels } => {
                expect_inputs(0)?;
                n_inputs += 1;
                if *channels == 0 {
                    return Err(Error::InvalidGraph("input has zero channels".into()));
                }
                *channels
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                ..
            } => {
                expect_inputs(1)?;
                if in_counts[0] != *in_channels {
                    return Err(Error::InvalidGraph(format!(
                        "conv `{}` declares {} input channels but `{}` produces {}",
                        layer.id, in_channels, layer.inputs[0], in_counts[0]
                    )));
                }
                if *out_channels == 0 || *kernel_size == 0 || *stride == 0 {
                    return Err(Error::InvalidGraph(format!(
                        "conv `{}` has a zero dimension",
                        layer.id
                    )));
                }
                *out_channels
            }
            LayerKind::Bn { channels } => {
                expect_inputs(1)?;
                let src = &layers[&layer.inputs[0]];
                match src.kind {
                    LayerKind::Conv { out_channels, .. } if out_channels == *channels => {}
                    _ => {
                        return Err(Error::InvalidGraph(format!(
                            "bn `{}` must follow a conv with {} output channels",
                            layer.id, channels
                        )))
                    }
                }
                *channels
            }
            LayerKind::Relu | LayerKind::Output => {
                expect_inputs(1)?;
                if matches!(layer.kind, LayerKind::Output) {
                    n_outputs += 1;
                }
                in_counts[0]
            }
            LayerKind::Maxpool { kernel_size } => {
                expect_inputs(1)?;
                if *kernel_size == 0 {
                    return Err(Error::InvalidGraph(format!(
                        "maxpool `{}` has zero kernel",
                        layer.id
                    )));
                }
                in_counts[0]
            }
            LayerKind::Upsample { scale } => {
                expect_inputs(1)?;
                if *scale == 0 {
                    return Err(Error::InvalidGraph(format!(
                        "upsample `{}` has zero scale",
                        layer.id
                    )));
                }
                in_counts[0]
            }
            LayerKind::Concat => {
                if layer.inputs.is_empty() {
                    return Err(Error::InvalidGraph(format!(
                        "concat `{}` has no inputs",
                        layer.id
                    )));
                }
                in_counts.iter().sum()
            }
        };
        counts.insert(layer.id.clone(), out);
    }
    if n_inputs != 1 || n_outputs != 1 {
        return Err(Error::InvalidGraph(format!(
            "graph needs exactly one input and one output layer (found {n_inputs} and {n_outputs})"
        )));
    }
    Ok(counts)
}

fn he_normal<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Array4<f32> {
    let fan_in = (cin * k * k).max(1) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    Array4::from_shape_simple_fn((cout, cin, k, k), || normal.sample(rng) as f32)
}
