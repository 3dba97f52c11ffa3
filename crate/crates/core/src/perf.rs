//! Analytical latency and RAM models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoopModel, Layer, ModelGraph};

/// Per-layer latencies in microseconds plus the cost of computing and
/// comparing the confidence score.
///
/// JSON form: `{"layers": {"conv1": 120, ...}, "l_cs": 3}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub layers: BTreeMap<String, u64>,
    pub l_cs: u64,
}

impl LatencyProfile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::param(format!("latency profile: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        LatencyProfile::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

/// Sum of the profiled latencies of every layer in `graph`.
pub fn arm_latency(graph: &ModelGraph, profile: &LatencyProfile) -> Result<u64> {
    graph.layers().iter().try_fold(0u64, |acc, spec| {
        let l = profile
            .layers
            .get(&spec.name)
            .ok_or_else(|| Error::MissingLayer(spec.name.clone()))?;
        acc.checked_add(*l).ok_or_else(|| Error::Numeric("arm latency overflows u64".into()))
    })
}

/// Latency of one sample: the BNN arm and the score always run, the INT8
/// arm only when the sample is forwarded.
pub fn coopnet_latency(routed_to_int8: bool, l_bnn: u64, l_int8: u64, l_cs: u64) -> u64 {
    if routed_to_int8 {
        l_bnn + l_cs + l_int8
    } else {
        l_bnn + l_cs
    }
}

/// Sum of per-sample latencies over a batch, given each sample's routing.
pub fn batch_latency(routing: &[bool], l_bnn: u64, l_int8: u64, l_cs: u64) -> u64 {
    routing.iter().map(|&r| coopnet_latency(r, l_bnn, l_int8, l_cs)).sum()
}

/// SYNTHETIC profile, not a measurement. int8 compute layers cost one
/// microsecond per thousand multiply-accumulates (at least 1), binary
/// convolutions a quarter of the equivalent int8 layer, other layers one
/// microsecond per thousand output elements. `l_cs` is 1.
pub fn synthetic_profile(m: &CoopModel) -> LatencyProfile {
    let mut layers = BTreeMap::new();
    for graph in [m.bnn(), m.int8()] {
        for (i, spec) in graph.layers().iter().enumerate() {
            let out = graph.maps()[i + 1].shape.len() as u64;
            let us = match &spec.layer {
                Layer::ConvInt8(p) => (out * p.weights.shape.window_len() as u64 / 1000).max(1),
                Layer::FcInt8(p) => (out * p.weights.shape.window_len() as u64 / 1000).max(1),
                Layer::BinConvFused { conv, .. } => {
                    ((out * conv.weights.shape().window_len() as u64 / 1000).max(1) / 4).max(1)
                }
                _ => (out / 1000).max(1),
            };
            layers.insert(spec.name.clone(), us);
        }
    }
    LatencyProfile { layers, l_cs: 1 }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ArmMemory {
    pub weights_bytes: usize,
    /// Peak of input + output map sizes over all layers.
    pub activations_bytes: usize,
    /// Largest patch row of any convolution.
    pub im2col_bytes: usize,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub bnn: ArmMemory,
    pub int8: ArmMemory,
    pub combined: ArmMemory,
}

/// Parameter bytes of one layer. int8 weights take a byte each and i32
/// biases four. Binary filters take `ceil(n / 8)` bytes each plus a byte
/// per filter for each of alpha, threshold and direction; a bridge keeps a
/// threshold and direction byte per channel.
pub fn layer_weight_bytes(layer: &Layer) -> usize {
    match layer {
        Layer::ConvInt8(p) => p.weights.data.len() + 4 * p.bias.len(),
        Layer::FcInt8(p) => p.weights.data.len() + 4 * p.bias.len(),
        Layer::BinConvFused { conv, .. } => {
            let k = conv.weights.shape();
            k.filters * (k.window_len().div_ceil(8) + 3)
        }
        Layer::BinActBridge(a) => 2 * a.channels(),
        Layer::MaxPool { .. } | Layer::Relu | Layer::SoftmaxHead => 0,
    }
}

fn im2col_bytes(layer: &Layer) -> usize {
    match layer {
        Layer::ConvInt8(p) => p.weights.shape.window_len(),
        Layer::BinConvFused { conv, .. } => conv.weights.shape().window_len().div_ceil(8),
        _ => 0,
    }
}

pub fn arm_memory(graph: &ModelGraph) -> ArmMemory {
    let maps = graph.maps();
    let mut mem = ArmMemory::default();
    for (i, spec) in graph.layers().iter().enumerate() {
        mem.weights_bytes += layer_weight_bytes(&spec.layer);
        mem.activations_bytes = mem.activations_bytes.max(maps[i].bytes() + maps[i + 1].bytes());
        mem.im2col_bytes = mem.im2col_bytes.max(im2col_bytes(&spec.layer));
    }
    mem.total_bytes = mem.weights_bytes + mem.activations_bytes + mem.im2col_bytes;
    mem
}

pub fn memory_report(m: &CoopModel) -> MemoryReport {
    let bnn = arm_memory(m.bnn());
    let int8 = arm_memory(m.int8());
    let combined = ArmMemory {
        weights_bytes: bnn.weights_bytes + int8.weights_bytes,
        activations_bytes: bnn.activations_bytes + int8.activations_bytes,
        im2col_bytes: bnn.im2col_bytes + int8.im2col_bytes,
        total_bytes: bnn.total_bytes + int8.total_bytes,
    };
    MemoryReport { bnn, int8, combined }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::int8::{AccMode, Int8FcParams};
    use crate::model::{build_tiny, ArmKind, LayerSpec};
    use crate::tensor::{KernelShape, QuantFilters, Shape};

    #[test]
    fn latency_branches() {
        assert_eq!(coopnet_latency(false, 10, 40, 0), 10);
        assert_eq!(coopnet_latency(true, 10, 40, 0), 50);
        assert_eq!(batch_latency(&[true, false, true], 10, 40, 2), 52 + 12 + 52);
    }

    #[test]
    fn arm_latency_sums_and_reports_gaps() {
        let m = build_tiny(1);
        let mut profile = LatencyProfile::default();
        assert!(matches!(arm_latency(m.bnn(), &profile), Err(Error::MissingLayer(_))));
        for (i, spec) in m.bnn().layers().iter().enumerate() {
            profile.layers.insert(spec.name.clone(), 10 * (i as u64 + 1));
        }
        let n = m.bnn().layers().len() as u64;
        assert_eq!(arm_latency(m.bnn(), &profile).unwrap(), 10 * n * (n + 1) / 2);
    }

    #[test]
    fn profile_json() {
        let p = LatencyProfile::from_json(r#"{"layers":{"a":10,"b":20,"c":30},"l_cs":1}"#).unwrap();
        assert_eq!(p.layers.values().sum::<u64>(), 60);
        assert_eq!(LatencyProfile::from_json(&p.to_json()).unwrap(), p);
        assert!(LatencyProfile::from_json(r#"{"layers":{"a":-1},"l_cs":1}"#).is_err());
        assert!(LatencyProfile::from_json(r#"{"layers":{}}"#).is_err());
    }

    #[test]
    fn fc_1024x10_weights() {
        let k = KernelShape::new(10, 1024, 1, 1).unwrap();
        let p = Int8FcParams {
            weights: QuantFilters::new(k, vec![1; 10240], -7).unwrap(),
            bias: vec![0; 10],
            out_scale_shift: 10,
            acc_mode: AccMode::Wide,
        };
        let layer = Layer::FcInt8(p);
        assert!(layer_weight_bytes(&layer) >= 10_240);
        let g = ModelGraph::new(
            ArmKind::Int8,
            Shape::new(1024, 1, 1).unwrap(),
            10,
            vec![LayerSpec::new("fc", layer), LayerSpec::new("head", Layer::SoftmaxHead)],
        )
        .unwrap();
        let mem = arm_memory(&g);
        assert_eq!(mem.weights_bytes, 10_240 + 40);
        assert_eq!(mem.activations_bytes, 1024 + 10);
        assert_eq!(mem.im2col_bytes, 0);
    }

    #[test]
    fn combined_is_additive() {
        let r = memory_report(&build_tiny(2));
        assert_eq!(r.combined.total_bytes, r.bnn.total_bytes + r.int8.total_bytes);
        assert!(r.bnn.weights_bytes < r.int8.weights_bytes * 4);
    }
}
