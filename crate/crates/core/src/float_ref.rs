//! Naive 32-bit float layer implementations.
//!
//! These are the correctness oracles for both quantized arms and make no
//! attempt at speed.

use crate::error::{Error, Result};
use crate::tensor::{window_output, FloatFilters, FloatTensor, Shape};

/// Default batch-norm epsilon when a model does not provide one.
pub const DEFAULT_BN_EPS: f32 = 1e-5;

/// Per-channel batch-normalization statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 || self.var.len() != n || self.gamma.len() != n || self.beta.len() != n {
            return Err(Error::shape("batch-norm parameter vectors must share one non-zero length"));
        }
        if self.eps < 0.0 || self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::param("batch-norm variance and epsilon must be non-negative"));
        }
        Ok(())
    }
}

/// Cross-correlation with zero padding and per-filter bias.
pub fn conv2d_ref(
    x: &FloatTensor,
    w: &FloatFilters,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<FloatTensor> {
    let s = x.shape();
    let k = w.shape;
    if k.channels != s.channels {
        return Err(Error::shape(format!(
            "filters expect {} channels, input has {}",
            k.channels, s.channels
        )));
    }
    if bias.len() != k.filters {
        return Err(Error::shape("bias length must equal filter count"));
    }
    let oh = window_output(s.height, k.height, stride, pad)
        .ok_or_else(|| Error::shape("kernel height does not fit input"))?;
    let ow = window_output(s.width, k.width, stride, pad)
        .ok_or_else(|| Error::shape("kernel width does not fit input"))?;
    let out_shape = Shape::new(k.filters, oh, ow)?;
    let mut out = vec![0f32; out_shape.len()];
    for f in 0..k.filters {
        let filt = w.filter(f);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[f];
                for c in 0..k.channels {
                    for ky in 0..k.height {
                        for kx in 0..k.width {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize
                            {
                                continue;
                            }
                            let wv = filt[(c * k.height + ky) * k.width + kx];
                            acc += wv * x.at(c, iy as usize, ix as usize);
                        }
                    }
                }
                out[out_shape.index(f, oy, ox)] = acc;
            }
        }
    }
    FloatTensor::new(out_shape, out)
}

/// Fully connected layer; each filter spans the whole input tensor.
pub fn fc_ref(x: &FloatTensor, w: &FloatFilters, bias: &[f32]) -> Result<FloatTensor> {
    if w.shape.window() != x.shape() {
        return Err(Error::shape(format!(
            "fc weights expect input {}, got {}",
            w.shape.window(),
            x.shape()
        )));
    }
    if bias.len() != w.shape.filters {
        return Err(Error::shape("bias length must equal output count"));
    }
    let out: Vec<f32> = (0..w.shape.filters)
        .map(|f| bias[f] + w.filter(f).iter().zip(x.data()).map(|(a, b)| a * b).sum::<f32>())
        .collect();
    FloatTensor::new(Shape::vector(w.shape.filters)?, out)
}

pub fn maxpool_ref(x: &FloatTensor, kernel: usize, stride: usize) -> Result<FloatTensor> {
    let s = x.shape();
    let (oh, ow) = pool_dims(s, kernel, stride)?;
    let out_shape = Shape::new(s.channels, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(x.at(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                out.push(m);
            }
        }
    }
    FloatTensor::new(out_shape, out)
}

pub(crate) fn pool_dims(s: Shape, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if kernel > s.height || kernel > s.width {
        return Err(Error::shape(format!("pool window {kernel} larger than input {s}")));
    }
    let oh = window_output(s.height, kernel, stride, 0);
    let ow = window_output(s.width, kernel, stride, 0);
    match (oh, ow) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::shape("pool kernel and stride must be >= 1")),
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn batchnorm_ref(x: &FloatTensor, bn: &BatchNorm) -> Result<FloatTensor> {
    bn.validate()?;
    let s = x.shape();
    if bn.channels() != s.channels {
        return Err(Error::shape("batch-norm channel count does not match input"));
    }
    let plane = s.plane();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            let denom = (bn.var[c] as f64 + bn.eps as f64).sqrt();
            (bn.gamma[c] as f64 * (v as f64 - bn.mean[c] as f64) / denom + bn.beta[c] as f64)
                as f32
        })
        .collect();
    FloatTensor::new(s, out)
}

pub fn relu_ref(x: &FloatTensor) -> FloatTensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    FloatTensor::new(x.shape(), data).expect("relu preserves shape and finiteness")
}

/// Sign binarization: `1` where `x >= 0`, else `0`.
pub fn sign_bits_ref(x: &FloatTensor) -> Vec<u8> {
    x.data().iter().map(|&v| (v >= 0.0) as u8).collect()
}

/// Numerically stable softmax in 32-bit float.
pub fn softmax_ref(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}
