//! Network definitions: the layer graph, its shape trace, parameter budget
//! and structural validation.

mod parse;
mod reference;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{conv_out_dim, Activation};

pub use parse::{parse_cfg, to_cfg_string, CfgError, ParsedCfg};
pub use reference::{reference_cfg, REFERENCE_CFG};

/// Filters a head convolution needs per grid cell: `anchors * (5 + classes)`
/// (four box offsets and one objectness score per anchor, plus class scores).
pub const fn filters_per_cell(anchors: usize, classes: usize) -> usize {
    anchors * (5 + classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub batch_normalize: bool,
    pub activation: Activation,
}

/// Prior box size in network-input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Convolutional(ConvSpec),
    /// Adds the output of layer `from` (absolute index) to the previous output.
    Shortcut { from: usize, activation: Activation },
    Dropout { probability: f64 },
    Yolo { anchors: Vec<Anchor>, classes: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Convolutional(_) => "convolutional",
            Self::Shortcut { .. } => "shortcut",
            Self::Dropout { .. } => "dropout",
            Self::Yolo { .. } => "yolo",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvSpec> {
        match self {
            Self::Convolutional(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDef {
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Channels, rows and columns of one activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl fmt::Display for Chw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.h, self.w)
    }
}

/// Output shape of every layer, in layer order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub input: Chw,
    pub layers: Vec<Chw>,
}

impl ShapeTrace {
    /// Shape entering layer `i`.
    pub fn input_of(&self, i: usize) -> Chw {
        if i == 0 {
            self.input
        } else {
            self.layers[i - 1]
        }
    }

    pub fn output(&self) -> Chw {
        *self.layers.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("layer {layer}: shortcut joins {a} and {b}")]
    ShapeMismatch { layer: usize, a: Chw, b: Chw },
    #[error("layer {layer}: non-positive output dimension")]
    NonPositiveDim { layer: usize },
    #[error("layer {layer}: shortcut source {from} is not an earlier layer")]
    BadReference { layer: usize, from: usize },
}

impl ShapeError {
    pub fn layer(&self) -> usize {
        match *self {
            Self::ShapeMismatch { layer, .. } | Self::NonPositiveDim { layer } | Self::BadReference { layer, .. } => {
                layer
            }
        }
    }
}

/// Convolution weight/statistic budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total_floats: usize,
    pub serialized_bytes: usize,
}

/// Size of the weights-file header in bytes.
pub const WEIGHTS_HEADER_BYTES: usize = 20;

/// Which structural rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    InputGeometry,
    ConvGeometry,
    DropoutProbability,
    EmptyAnchors,
    HeadFilters,
    HeadActivation,
    HeadInput,
    ShortcutSource,
    Shape,
    /// Kernels limited to 1x1 and 3x3.
    KernelSize,
    /// Exactly one detection head.
    SingleHead,
    /// The detection head closes the network.
    HeadLast,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::InputGeometry => "input geometry",
            Self::ConvGeometry => "convolution geometry",
            Self::DropoutProbability => "dropout probability",
            Self::EmptyAnchors => "empty anchor list",
            Self::HeadFilters => "head filter count",
            Self::HeadActivation => "head activation",
            Self::HeadInput => "head input",
            Self::ShortcutSource => "shortcut source",
            Self::Shape => "shape",
            Self::KernelSize => "kernel size limit",
            Self::SingleHead => "single-head profile",
            Self::HeadLast => "head position",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i}: {}: {}", self.rule, self.detail),
            None => write!(f, "network: {}: {}", self.rule, self.detail),
        }
    }
}

/// The detection head: the layer index of the yolo section and its settings.
#[derive(Debug, Clone, Copy)]
pub struct HeadRef<'a> {
    pub layer: usize,
    pub anchors: &'a [Anchor],
    pub classes: usize,
}

/// A convolution together with the channel count it consumes.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer<'a> {
    pub layer: usize,
    pub spec: &'a ConvSpec,
    pub in_channels: usize,
}

impl ConvLayer<'_> {
    pub fn weight_count(&self) -> usize {
        self.spec.filters * self.in_channels * self.spec.size * self.spec.size
    }

    /// Biases plus, when batch-normalized, gamma/mean/variance.
    pub fn vector_count(&self) -> usize {
        if self.spec.batch_normalize {
            4 * self.spec.filters
        } else {
            self.spec.filters
        }
    }
}

impl NetworkDef {
    pub fn input_chw(&self) -> Chw {
        Chw {
            c: self.input_channels,
            h: self.input_height,
            w: self.input_width,
        }
    }

    /// The last yolo layer, if any.
    pub fn head(&self) -> Option<HeadRef<'_>> {
        self.layers.iter().enumerate().rev().find_map(|(layer, l)| match l {
            LayerSpec::Yolo { anchors, classes } => Some(HeadRef {
                layer,
                anchors,
                classes: *classes,
            }),
            _ => None,
        })
    }

    /// Convolutions in layer order with their input channel counts. Channels
    /// are tracked without geometry, so this works on any def whose shortcut
    /// sources point backwards.
    pub fn conv_layers(&self) -> Vec<ConvLayer<'_>> {
        let mut channels = Vec::with_capacity(self.layers.len());
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_c = if i == 0 { self.input_channels } else { channels[i - 1] };
            let c = match layer {
                LayerSpec::Convolutional(spec) => {
                    out.push(ConvLayer {
                        layer: i,
                        spec,
                        in_channels: in_c,
                    });
                    spec.filters
                }
                _ => in_c,
            };
            channels.push(c);
        }
        out
    }

    /// Per-layer output shapes.
    pub fn infer_shapes(&self) -> Result<ShapeTrace, ShapeError> {
        let input = self.input_chw();
        let mut layers: Vec<Chw> = Vec::with_capacity(self.layers.len());
        if input.c == 0 || input.h == 0 || input.w == 0 {
            return Err(ShapeError::NonPositiveDim { layer: 0 });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = if i == 0 { input } else { layers[i - 1] };
            let out = match layer {
                LayerSpec::Convolutional(c) => {
                    let h = conv_out_dim(prev.h, c.size, c.stride, c.pad);
                    let w = conv_out_dim(prev.w, c.size, c.stride, c.pad);
                    match (h, w) {
                        (Some(h), Some(w)) if h > 0 && w > 0 && c.filters > 0 => Chw { c: c.filters, h, w },
                        _ => return Err(ShapeError::NonPositiveDim { layer: i }),
                    }
                }
                LayerSpec::Shortcut { from, .. } => {
                    if *from >= i {
                        return Err(ShapeError::BadReference { layer: i, from: *from });
                    }
                    let other = layers[*from];
                    if other != prev {
                        return Err(ShapeError::ShapeMismatch {
                            layer: i,
                            a: prev,
                            b: other,
                        });
                    }
                    prev
                }
                LayerSpec::Dropout { .. } | LayerSpec::Yolo { .. } => prev,
            };
            layers.push(out);
        }
        Ok(ShapeTrace { input, layers })
    }

    pub fn param_count(&self) -> ParamCount {
        let total_floats = self
            .conv_layers()
            .iter()
            .map(|c| c.weight_count() + c.vector_count())
            .sum::<usize>();
        ParamCount {
            total_floats,
            serialized_bytes: WEIGHTS_HEADER_BYTES + 4 * total_floats,
        }
    }

    /// Every broken structural rule; empty when the def is usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        macro_rules! push {
            ($layer:expr, $rule:expr, $detail:expr $(,)?) => {
                out.push(Violation {
                    layer: $layer,
                    rule: $rule,
                    detail: $detail,
                })
            };
        }

        if self.input_width == 0 || self.input_height == 0 || self.input_channels == 0 {
            push!(
                None,
                Rule::InputGeometry,
                format!(
                    "input {}x{}x{} must be positive",
                    self.input_width, self.input_height, self.input_channels
                ),
            );
        }
        if self.layers.is_empty() {
            push!(None, Rule::SingleHead, "network has no layers".into());
            return out;
        }

        let mut heads = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Convolutional(c) => {
                    if c.filters == 0 || c.size == 0 || c.stride == 0 {
                        push!(
                            Some(i),
                            Rule::ConvGeometry,
                            format!("filters={} size={} stride={} must be >= 1", c.filters, c.size, c.stride),
                        );
                    }
                    if c.size > 3 {
                        push!(
                            Some(i),
                            Rule::KernelSize,
                            format!("kernel {0}x{0} exceeds the 3x3 limit", c.size),
                        );
                    } else if c.size == 2 {
                        push!(Some(i), Rule::KernelSize, "kernel 2x2 is neither 1x1 nor 3x3".into());
                    }
                }
                LayerSpec::Shortcut { from, .. } => {
                    if *from >= i {
                        push!(Some(i), Rule::ShortcutSource, format!("source {from} is not an earlier layer"));
                    }
                }
                LayerSpec::Dropout { probability } => {
                    if !(0.0..1.0).contains(probability) {
                        push!(
                            Some(i),
                            Rule::DropoutProbability,
                            format!("probability {probability} outside [0, 1)"),
                        );
                    }
                }
                LayerSpec::Yolo { anchors, classes } => {
                    heads += 1;
                    if anchors.is_empty() {
                        push!(Some(i), Rule::EmptyAnchors, "no anchors".into());
                    }
                    if anchors.iter().any(|a| !(a.w > 0.0 && a.h > 0.0)) {
                        push!(Some(i), Rule::EmptyAnchors, "anchor sizes must be positive".into());
                    }
                    match i.checked_sub(1).map(|p| &self.layers[p]) {
                        Some(LayerSpec::Convolutional(c)) => {
                            let need = filters_per_cell(anchors.len(), *classes);
                            if c.filters != need {
                                push!(
                                    Some(i - 1),
                                    Rule::HeadFilters,
                                    format!(
                                        "{} filters, {} anchors x (5 + {} classes) needs {need}",
                                        c.filters,
                                        anchors.len(),
                                        classes
                                    ),
                                );
                            }
                            if c.activation != Activation::Linear {
                                push!(
                                    Some(i - 1),
                                    Rule::HeadActivation,
                                    format!("head convolution must be linear, got {}", c.activation.name()),
                                );
                            }
                        }
                        _ => push!(Some(i), Rule::HeadInput, "yolo layer must follow a convolution".into()),
                    }
                    if i + 1 != self.layers.len() {
                        push!(Some(i), Rule::HeadLast, "yolo layer must be the last layer".into());
                    }
                }
            }
        }
        if heads != 1 {
            push!(None, Rule::SingleHead, format!("{heads} yolo layers, exactly one required"));
        }

        let structurally_sound = !out
            .iter()
            .any(|v| matches!(v.rule, Rule::ConvGeometry | Rule::ShortcutSource | Rule::InputGeometry));
        if structurally_sound {
            if let Err(e) = self.infer_shapes() {
                push!(Some(e.layer()), Rule::Shape, e.to_string());
            }
        }
        out
    }

    /// Same topology with every convolution's width divided by `divisor`,
    /// except the head convolution whose filter count is fixed by the anchors.
    pub fn with_width_divisor(&self, divisor: usize) -> NetworkDef {
        let head_conv = self.head().and_then(|h| h.layer.checked_sub(1));
        let mut def = self.clone();
        for (i, layer) in def.layers.iter_mut().enumerate() {
            if let LayerSpec::Convolutional(c) = layer {
                if Some(i) != head_conv {
                    c.filters = (c.filters / divisor.max(1)).max(1);
                }
            }
        }
        def
    }

    pub fn with_input(&self, width: usize, height: usize) -> NetworkDef {
        NetworkDef {
            input_width: width,
            input_height: height,
            ..self.clone()
        }
    }

    /// Replaces the head's anchors and resizes the convolution feeding it.
    pub fn with_anchors(&self, new_anchors: &[Anchor]) -> NetworkDef {
        let mut def = self.clone();
        let Some(at) = def.layers.iter().rposition(|l| matches!(l, LayerSpec::Yolo { .. })) else {
            return def;
        };
        let mut classes = 0;
        if let LayerSpec::Yolo { anchors, classes: c } = &mut def.layers[at] {
            *anchors = new_anchors.to_vec();
            classes = *c;
        }
        if let Some(LayerSpec::Convolutional(c)) = at.checked_sub(1).map(|i| &mut def.layers[i]) {
            c.filters = filters_per_cell(new_anchors.len(), classes);
        }
        def
    }
}
