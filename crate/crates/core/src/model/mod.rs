//! Two-arm model description, validation and forward execution.

mod builders;
mod format;

pub use builders::{
    build_caffenet, build_fernet, build_gscnet, build_tiny, Topology, DEFAULT_SEED,
};
pub use format::{from_bytes, load, save, to_bytes, FORMAT_VERSION, MAGIC};

use std::collections::HashSet;

use crate::bnn::{
    binact_bridge, binconv_thresholded, bipolar_to_int8, maxpool_bits, BinActParams,
    BinConvParams,
};
use crate::error::{Error, FormatError, Result};
use crate::float_ref::{pool_dims, softmax_ref};
use crate::int8::{conv2d_int8, fc_int8, maxpool_int8, relu_int8, Int8ConvParams, Int8FcParams};
use crate::tensor::{check_scale_exp, BitTensor, QuantTensor, Shape};

/// Scale exponent of arm inputs: pixels enter as `p / 256` at `2^-7`.
pub const INPUT_SCALE_EXP: i32 = -7;

/// Converts u8 pixels (CHW) to an arm input: `p >> 1` at scale `2^-7`.
pub fn input_tensor(pixels: &[u8], shape: Shape) -> Result<QuantTensor> {
    let data = pixels.iter().map(|&p| (p >> 1) as i8).collect();
    QuantTensor::new(shape, data, INPUT_SCALE_EXP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    ConvInt8,
    FcInt8,
    MaxPool,
    Relu,
    BinConvFused,
    BinActBridge,
    SoftmaxHead,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::ConvInt8 => 1,
            LayerKind::FcInt8 => 2,
            LayerKind::MaxPool => 3,
            LayerKind::Relu => 4,
            LayerKind::BinConvFused => 5,
            LayerKind::BinActBridge => 6,
            LayerKind::SoftmaxHead => 7,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::ConvInt8,
            2 => LayerKind::FcInt8,
            3 => LayerKind::MaxPool,
            4 => LayerKind::Relu,
            5 => LayerKind::BinConvFused,
            6 => LayerKind::BinActBridge,
            7 => LayerKind::SoftmaxHead,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::ConvInt8 => "conv_int8",
            LayerKind::FcInt8 => "fc_int8",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::BinConvFused => "binconv_fused",
            LayerKind::BinActBridge => "binact_bridge",
            LayerKind::SoftmaxHead => "softmax_head",
        }
    }

    fn is_int8_compute(self) -> bool {
        matches!(self, LayerKind::ConvInt8 | LayerKind::FcInt8)
    }

    fn is_parameterized(self) -> bool {
        matches!(
            self,
            LayerKind::ConvInt8 | LayerKind::FcInt8 | LayerKind::BinConvFused | LayerKind::BinActBridge
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    ConvInt8(Int8ConvParams),
    FcInt8(Int8FcParams),
    MaxPool { kernel: usize, stride: usize },
    Relu,
    BinConvFused { conv: BinConvParams, act: BinActParams },
    BinActBridge(BinActParams),
    SoftmaxHead,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::ConvInt8(_) => LayerKind::ConvInt8,
            Layer::FcInt8(_) => LayerKind::FcInt8,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Relu => LayerKind::Relu,
            Layer::BinConvFused { .. } => LayerKind::BinConvFused,
            Layer::BinActBridge(_) => LayerKind::BinActBridge,
            Layer::SoftmaxHead => LayerKind::SoftmaxHead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub layer: Layer,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, layer: Layer) -> Self {
        LayerSpec { name: name.into(), layer }
    }

    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }
}

/// Value representation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    /// int8 fixed point with a known scale exponent.
    Int8 { scale_exp: i32 },
    Bits,
    /// Softmax probabilities (terminal).
    Probs,
}

/// Static description of a layer boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapInfo {
    pub domain: Domain,
    pub shape: Shape,
}

impl MapInfo {
    /// Buffer size of the map at its precision.
    pub fn bytes(&self) -> usize {
        match self.domain {
            Domain::Int8 { .. } => self.shape.len(),
            Domain::Bits => self.shape.len().div_ceil(8),
            Domain::Probs => 4 * self.shape.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArmKind {
    Bnn,
    Int8,
}

impl ArmKind {
    pub fn name(self) -> &'static str {
        match self {
            ArmKind::Bnn => "bnn",
            ArmKind::Int8 => "int8",
        }
    }
}

/// One network arm. Construction validates the full shape and scale chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: Shape,
    num_classes: usize,
    arm: ArmKind,
    maps: Vec<MapInfo>,
}

fn chain_err(layer: &str, detail: impl Into<String>) -> Error {
    Error::Format(FormatError::ShapeChain { layer: layer.to_string(), detail: detail.into() })
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format(FormatError::Malformed(detail.into()))
}

impl ModelGraph {
    pub fn new(
        arm: ArmKind,
        input_shape: Shape,
        num_classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(malformed(format!("{} arm has no layers", arm.name())));
        }
        let maps = validate_chain(arm, input_shape, num_classes, &layers)?;
        Ok(ModelGraph { layers, input_shape, num_classes, arm, maps })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn arm(&self) -> ArmKind {
        self.arm
    }

    /// Map descriptions at every boundary: `maps()[i]` is layer `i`'s input,
    /// `maps()[i + 1]` its output.
    pub fn maps(&self) -> &[MapInfo] {
        &self.maps
    }

    /// Runs the arm and returns its class probabilities.
    pub fn forward(&self, x: &QuantTensor) -> Result<ArmOutput> {
        self.forward_trace(x, |_, _| {})
    }

    /// Like [`forward`](Self::forward), calling `visit` with every layer output.
    pub fn forward_trace(
        &self,
        x: &QuantTensor,
        mut visit: impl FnMut(&LayerSpec, &Activation),
    ) -> Result<ArmOutput> {
        if x.shape() != self.input_shape {
            return Err(Error::shape(format!(
                "input {} does not match model input {}",
                x.shape(),
                self.input_shape
            )));
        }
        if x.scale_exp() != INPUT_SCALE_EXP {
            return Err(Error::param(format!(
                "input scale exponent must be {INPUT_SCALE_EXP}, got {}",
                x.scale_exp()
            )));
        }
        let mut value = Activation::Quant(x.clone());
        for spec in &self.layers {
            if let Layer::SoftmaxHead = spec.layer {
                let Activation::Quant(q) = &value else {
                    unreachable!("validated chain ends in int8 logits");
                };
                let logits = q.dequantize().into_data();
                let probs = softmax_ref(&logits)?;
                return Ok(ArmOutput { logits, probs });
            }
            value = apply(&spec.layer, value)?;
            visit(spec, &value);
        }
        unreachable!("validated chain ends in a softmax head")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutput {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Activation {
    Quant(QuantTensor),
    Bits(BitTensor),
}

fn as_quant(value: Activation) -> QuantTensor {
    match value {
        Activation::Quant(q) => q,
        Activation::Bits(b) => bipolar_to_int8(&b),
    }
}

fn apply(layer: &Layer, value: Activation) -> Result<Activation> {
    Ok(match (layer, value) {
        (Layer::ConvInt8(p), v) => Activation::Quant(conv2d_int8(&as_quant(v), p)?),
        (Layer::FcInt8(p), v) => Activation::Quant(fc_int8(&as_quant(v), p)?),
        (Layer::MaxPool { kernel, stride }, Activation::Quant(q)) => {
            Activation::Quant(maxpool_int8(&q, *kernel, *stride)?)
        }
        (Layer::MaxPool { kernel, stride }, Activation::Bits(b)) => {
            Activation::Bits(maxpool_bits(&b, *kernel, *stride)?)
        }
        (Layer::Relu, Activation::Quant(q)) => Activation::Quant(relu_int8(&q)),
        (Layer::BinConvFused { conv, act }, Activation::Bits(b)) => {
            Activation::Bits(binconv_thresholded(&b, conv, act)?)
        }
        (Layer::BinActBridge(a), Activation::Quant(q)) => Activation::Bits(binact_bridge(&q, a)?),
        (layer, _) => {
            return Err(Error::shape(format!("{} received the wrong activation type", layer.kind().name())))
        }
    })
}

fn validate_chain(
    arm: ArmKind,
    input: Shape,
    num_classes: usize,
    layers: &[LayerSpec],
) -> Result<Vec<MapInfo>> {
    let mut names = HashSet::new();
    for spec in layers {
        if spec.name.is_empty() || spec.name.len() > u8::MAX as usize {
            return Err(malformed("layer names must be 1..=255 bytes"));
        }
        if !names.insert(spec.name.as_str()) {
            return Err(malformed(format!("duplicate layer name `{}`", spec.name)));
        }
    }

    let params: Vec<LayerKind> =
        layers.iter().map(|l| l.kind()).filter(|k| k.is_parameterized()).collect();
    match arm {
        ArmKind::Bnn => {
            let ok = params.first().is_some_and(|k| k.is_int8_compute())
                && params.last().is_some_and(|k| k.is_int8_compute());
            if !ok {
                return Err(malformed("bnn arm must start and end with int8 layers"));
            }
        }
        ArmKind::Int8 => {
            if layers
                .iter()
                .any(|l| matches!(l.kind(), LayerKind::BinConvFused | LayerKind::BinActBridge))
            {
                return Err(malformed("int8 arm may not contain binary layers"));
            }
        }
    }

    let mut maps = Vec::with_capacity(layers.len() + 1);
    let mut cur = MapInfo { domain: Domain::Int8 { scale_exp: INPUT_SCALE_EXP }, shape: input };
    maps.push(cur);
    for (i, spec) in layers.iter().enumerate() {
        if cur.domain == Domain::Probs {
            return Err(chain_err(&spec.name, "layer follows the softmax head"));
        }
        let name = spec.name.as_str();
        let wrap = |e: Error| match e {
            Error::Format(_) => e,
            other => chain_err(name, other.to_string()),
        };
        let next = match &spec.layer {
            Layer::ConvInt8(p) => {
                p.validate().map_err(wrap)?;
                let shape = p.output_shape(cur.shape).map_err(wrap)?;
                let scale = int8_out_scale(cur.domain, p.weights.scale_exp, p.out_scale_shift)
                    .map_err(wrap)?;
                MapInfo { domain: Domain::Int8 { scale_exp: scale }, shape }
            }
            Layer::FcInt8(p) => {
                p.validate().map_err(wrap)?;
                let shape = p.output_shape(cur.shape).map_err(wrap)?;
                let scale = int8_out_scale(cur.domain, p.weights.scale_exp, p.out_scale_shift)
                    .map_err(wrap)?;
                MapInfo { domain: Domain::Int8 { scale_exp: scale }, shape }
            }
            Layer::MaxPool { kernel, stride } => {
                let (h, w) = pool_dims(cur.shape, *kernel, *stride).map_err(wrap)?;
                MapInfo { domain: cur.domain, shape: Shape::new(cur.shape.channels, h, w)? }
            }
            Layer::Relu => {
                if !matches!(cur.domain, Domain::Int8 { .. }) {
                    return Err(chain_err(name, "relu needs an int8 input"));
                }
                cur
            }
            Layer::BinConvFused { conv, act } => {
                if cur.domain != Domain::Bits {
                    return Err(chain_err(name, "binary conv needs a bit input"));
                }
                conv.validate().map_err(wrap)?;
                act.validate().map_err(wrap)?;
                let shape = conv.output_shape(cur.shape).map_err(wrap)?;
                if act.channels() != shape.channels {
                    return Err(chain_err(name, "threshold count does not match filters"));
                }
                MapInfo { domain: Domain::Bits, shape }
            }
            Layer::BinActBridge(act) => {
                if !matches!(cur.domain, Domain::Int8 { .. }) {
                    return Err(chain_err(name, "bridge needs an int8 input"));
                }
                act.validate().map_err(wrap)?;
                if act.channels() != cur.shape.channels {
                    return Err(chain_err(name, "threshold count does not match channels"));
                }
                MapInfo { domain: Domain::Bits, shape: cur.shape }
            }
            Layer::SoftmaxHead => {
                if !matches!(cur.domain, Domain::Int8 { .. }) {
                    return Err(chain_err(name, "softmax head needs int8 logits"));
                }
                if cur.shape.len() != num_classes {
                    return Err(chain_err(
                        name,
                        format!("{} logits for {num_classes} classes", cur.shape.len()),
                    ));
                }
                if i + 1 != layers.len() {
                    return Err(chain_err(name, "softmax head must be the last layer"));
                }
                MapInfo { domain: Domain::Probs, shape: cur.shape }
            }
        };
        maps.push(next);
        cur = next;
    }
    if cur.domain != Domain::Probs {
        let last = &layers[layers.len() - 1].name;
        return Err(chain_err(last, "arm must end with a softmax head"));
    }
    Ok(maps)
}

fn int8_out_scale(input: Domain, weight_exp: i32, shift: u32) -> Result<i32> {
    let in_exp = match input {
        Domain::Int8 { scale_exp } => scale_exp,
        Domain::Bits => 0,
        Domain::Probs => return Err(Error::shape("int8 layer after softmax")),
    };
    let exp = in_exp + weight_exp + shift as i32;
    check_scale_exp(exp)?;
    Ok(exp)
}

/// The cooperative pair of arms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoopModel {
    bnn: ModelGraph,
    int8: ModelGraph,
    class_labels: Option<Vec<String>>,
}

impl CoopModel {
    pub fn new(bnn: ModelGraph, int8: ModelGraph, class_labels: Option<Vec<String>>) -> Result<Self> {
        if bnn.arm != ArmKind::Bnn || int8.arm != ArmKind::Int8 {
            return Err(malformed("arms supplied in the wrong slots"));
        }
        if bnn.input_shape != int8.input_shape || bnn.num_classes != int8.num_classes {
            return Err(malformed("arms disagree on input shape or class count"));
        }
        if let Some(labels) = &class_labels {
            if labels.len() != bnn.num_classes {
                return Err(malformed("label count does not match class count"));
            }
            if labels.iter().any(|l| l.len() > u8::MAX as usize) {
                return Err(malformed("class label longer than 255 bytes"));
            }
        }
        let bnn_names: HashSet<&str> = bnn.layers.iter().map(|l| l.name.as_str()).collect();
        if let Some(dup) = int8.layers.iter().find(|l| bnn_names.contains(l.name.as_str())) {
            return Err(malformed(format!("layer name `{}` used in both arms", dup.name)));
        }
        Ok(CoopModel { bnn, int8, class_labels })
    }

    pub fn bnn(&self) -> &ModelGraph {
        &self.bnn
    }

    pub fn int8(&self) -> &ModelGraph {
        &self.int8
    }

    pub fn arm(&self, kind: ArmKind) -> &ModelGraph {
        match kind {
            ArmKind::Bnn => &self.bnn,
            ArmKind::Int8 => &self.int8,
        }
    }

    pub fn class_labels(&self) -> Option<&[String]> {
        self.class_labels.as_deref()
    }

    pub fn input_shape(&self) -> Shape {
        self.bnn.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.bnn.num_classes
    }

    /// Display name of a class: its label if present, else its index.
    pub fn class_name(&self, class: usize) -> String {
        match &self.class_labels {
            Some(labels) => labels[class].clone(),
            None => class.to_string(),
        }
    }

    /// Human-readable layer listing.
    pub fn inspect(&self) -> String {
        let mut out = format!(
            "input {} -> {} classes\n",
            self.input_shape(),
            self.num_classes()
        );
        for graph in [&self.bnn, &self.int8] {
            out.push_str(&format!("[{}] {} layers\n", graph.arm.name(), graph.layers.len()));
            for (i, spec) in graph.layers.iter().enumerate() {
                let (inp, outp) = (graph.maps[i], graph.maps[i + 1]);
                out.push_str(&format!(
                    "  {:<16} {:<14} {} -> {}{}\n",
                    spec.name,
                    spec.kind().name(),
                    inp.shape,
                    outp.shape,
                    describe(&spec.layer)
                ));
            }
        }
        out
    }
}

fn describe(layer: &Layer) -> String {
    match layer {
        Layer::ConvInt8(p) => format!(
            "  k={} s={} p={} shift={}",
            p.weights.shape, p.stride, p.pad, p.out_scale_shift
        ),
        Layer::FcInt8(p) => format!("  w={} shift={}", p.weights.shape, p.out_scale_shift),
        Layer::MaxPool { kernel, stride } => format!("  k={kernel} s={stride}"),
        Layer::BinConvFused { conv, .. } => {
            format!("  k={} s={} n={}", conv.weights.shape(), conv.stride, conv.n_effective())
        }
        _ => String::new(),
    }
}
