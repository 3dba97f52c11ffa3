//! The two-arm controller: BNN first, INT8 when the BNN is unsure.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::idx::Dataset;
use crate::model::{input_tensor, ArmKind, CoopModel};
use crate::perf::{arm_latency, coopnet_latency, LatencyProfile};
use crate::tensor::QuantTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Bnn,
    Int8,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Bnn => "bnn",
            Source::Int8 => "int8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub top1: usize,
    /// Confidence score of `probs`.
    pub cs: f32,
    pub source: Source,
    /// Confidence score of the BNN arm, the value compared against CT.
    pub gate_cs: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    ct: f64,
}

impl CascadeConfig {
    pub fn new(ct: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ct) {
            return Err(Error::param(format!("confidence threshold must be in [0, 1), got {ct}")));
        }
        Ok(CascadeConfig { ct })
    }

    pub fn ct(&self) -> f64 {
        self.ct
    }

    /// True when a sample with BNN confidence `cs` stays on the BNN arm.
    pub fn accepts(&self, cs: f32) -> bool {
        f64::from(cs) >= self.ct
    }
}

/// Indices of the largest and second-largest probability; ties go to the
/// lower index.
pub fn top_two(probs: &[f32]) -> Result<(usize, usize)> {
    if probs.len() < 2 {
        return Err(Error::shape(format!("need at least 2 classes, got {}", probs.len())));
    }
    let (mut first, mut second) = if probs[1] > probs[0] { (1, 0) } else { (0, 1) };
    for (i, &p) in probs.iter().enumerate().skip(2) {
        if p > probs[first] {
            second = first;
            first = i;
        } else if p > probs[second] {
            second = i;
        }
    }
    Ok((first, second))
}

pub fn confidence_score(probs: &[f32]) -> Result<f32> {
    let (a, b) = top_two(probs)?;
    Ok(probs[a] - probs[b])
}

fn prediction(probs: Vec<f32>, source: Source, gate_cs: Option<f32>) -> Result<Prediction> {
    let (a, b) = top_two(&probs)?;
    let cs = probs[a] - probs[b];
    Ok(Prediction { top1: a, cs, source, gate_cs: gate_cs.unwrap_or(cs), probs })
}

pub fn infer(m: &CoopModel, x: &QuantTensor, cfg: &CascadeConfig) -> Result<Prediction> {
    let bnn = m.bnn().forward(x)?.probs;
    let gate = confidence_score(&bnn)?;
    if cfg.accepts(gate) {
        prediction(bnn, Source::Bnn, Some(gate))
    } else {
        prediction(m.int8().forward(x)?.probs, Source::Int8, Some(gate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub class: usize,
    pub source: Source,
    pub cs: f32,
    pub gate_cs: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub ct: f64,
    pub samples: Vec<SampleRecord>,
    pub forwarded_count: usize,
    pub accuracy: Option<f64>,
    pub modeled_latency_us: u64,
}

fn check_inputs(m: &CoopModel, data: &Dataset, labels: Option<&[u8]>) -> Result<()> {
    if data.shape() != m.input_shape() {
        return Err(Error::shape(format!(
            "dataset images are {}, model expects {}",
            data.shape(),
            m.input_shape()
        )));
    }
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(Error::Dataset(format!(
                "{} labels for {} images",
                l.len(),
                data.len()
            )));
        }
    }
    Ok(())
}

fn accuracy(classes: impl Iterator<Item = usize>, labels: Option<&[u8]>) -> Option<f64> {
    labels.map(|l| {
        let correct = classes.zip(l).filter(|&(c, &y)| c == y as usize).count();
        correct as f64 / l.len() as f64
    })
}

fn summarize(
    ct: f64,
    samples: Vec<SampleRecord>,
    labels: Option<&[u8]>,
    l_bnn: u64,
    l_int8: u64,
    l_cs: u64,
) -> BatchReport {
    let forwarded_count = samples.iter().filter(|s| s.source == Source::Int8).count();
    let modeled_latency_us = samples
        .iter()
        .map(|s| coopnet_latency(s.source == Source::Int8, l_bnn, l_int8, l_cs))
        .sum();
    let accuracy = accuracy(samples.iter().map(|s| s.class), labels);
    BatchReport { ct, samples, forwarded_count, accuracy, modeled_latency_us }
}

/// Runs the cascade on every image. Samples are processed in parallel;
/// records stay in dataset order.
pub fn evaluate_batch(
    m: &CoopModel,
    data: &Dataset,
    labels: Option<&[u8]>,
    cfg: &CascadeConfig,
    profile: &LatencyProfile,
) -> Result<BatchReport> {
    check_inputs(m, data, labels)?;
    let l_bnn = arm_latency(m.bnn(), profile)?;
    let l_int8 = arm_latency(m.int8(), profile)?;
    let shape = m.input_shape();
    let samples = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let p = infer(m, &input_tensor(data.sample(i), shape)?, cfg)?;
            Ok(SampleRecord { class: p.top1, source: p.source, cs: p.cs, gate_cs: p.gate_cs })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cfg.ct(), samples, labels, l_bnn, l_int8, profile.l_cs))
}

/// Both arm outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPass {
    pub bnn: Prediction,
    pub int8: Prediction,
}

/// Runs both arms on every image (parallel, dataset order).
pub fn dual_pass(m: &CoopModel, data: &Dataset) -> Result<Vec<DualPass>> {
    check_inputs(m, data, None)?;
    let shape = m.input_shape();
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = input_tensor(data.sample(i), shape)?;
            let run = |arm: ArmKind, source| prediction(m.arm(arm).forward(&x)?.probs, source, None);
            Ok(DualPass { bnn: run(ArmKind::Bnn, Source::Bnn)?, int8: run(ArmKind::Int8, Source::Int8)? })
        })
        .collect()
}

/// Routes precomputed arm outputs at `cfg`; identical to [`evaluate_batch`].
pub fn route_batch(
    passes: &[DualPass],
    labels: Option<&[u8]>,
    cfg: &CascadeConfig,
    l_bnn: u64,
    l_int8: u64,
    l_cs: u64,
) -> BatchReport {
    let samples = passes
        .iter()
        .map(|d| {
            let gate = d.bnn.cs;
            let chosen = if cfg.accepts(gate) { &d.bnn } else { &d.int8 };
            SampleRecord { class: chosen.top1, source: chosen.source, cs: chosen.cs, gate_cs: gate }
        })
        .collect();
    summarize(cfg.ct(), samples, labels, l_bnn, l_int8, l_cs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub ct: f64,
    pub accuracy: Option<f64>,
    pub delta_vs_int8: Option<f64>,
    pub forwarded_fraction: f64,
    pub avg_speedup: f64,
    pub modeled_latency_us: u64,
}

/// One row per threshold. `avg_speedup = 1 - L / (BS * L_INT8)`, against
/// running the INT8 arm alone on every sample.
pub fn sweep_ct(
    m: &CoopModel,
    data: &Dataset,
    labels: Option<&[u8]>,
    ct_values: &[f64],
    profile: &LatencyProfile,
) -> Result<Vec<SweepRow>> {
    let cfgs = ct_values.iter().map(|&ct| CascadeConfig::new(ct)).collect::<Result<Vec<_>>>()?;
    check_inputs(m, data, labels)?;
    let l_bnn = arm_latency(m.bnn(), profile)?;
    let l_int8 = arm_latency(m.int8(), profile)?;
    let passes = dual_pass(m, data)?;
    let int8_acc = accuracy(passes.iter().map(|d| d.int8.top1), labels);
    let bs = passes.len() as f64;
    Ok(cfgs
        .iter()
        .map(|cfg| {
            let r = route_batch(&passes, labels, cfg, l_bnn, l_int8, profile.l_cs);
            let baseline = bs * l_int8 as f64;
            SweepRow {
                ct: cfg.ct(),
                accuracy: r.accuracy,
                delta_vs_int8: r.accuracy.zip(int8_acc).map(|(a, b)| a - b),
                forwarded_fraction: r.forwarded_count as f64 / bs,
                avg_speedup: if baseline > 0.0 {
                    1.0 - r.modeled_latency_us as f64 / baseline
                } else {
                    0.0
                },
                modeled_latency_us: r.modeled_latency_us,
            }
        })
        .collect())
}

/// Parses `start:end:step` into the thresholds `start, start+step, ...` up to
/// and including `end` (with a small tolerance for float accumulation).
pub fn ct_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !start.is_finite() || !end.is_finite() || end < start {
        return Err(Error::param(format!("bad CT range {start}:{end}:{step}")));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    if count > 1_000_000 {
        return Err(Error::param("CT range has too many points"));
    }
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}
