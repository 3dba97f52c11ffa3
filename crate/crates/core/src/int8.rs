//! Fixed-point (q = 8) execution path.
//!
//! Products of int8 operands are accumulated in an integer accumulator with
//! the bias pre-scaled to accumulator scale, then shifted right by a per-layer
//! `out_scale_shift` and saturated back to int8. The output scale exponent is
//! `x.scale_exp + w.scale_exp + out_scale_shift`.

use crate::error::{Error, Result};
use crate::float_ref::pool_dims;
use crate::tensor::{window_output, QuantFilters, QuantTensor, Shape};

/// Accumulation strategy for int8 dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AccMode {
    /// Exact 32-bit accumulation.
    #[default]
    Wide,
    /// 16-bit accumulator saturated after every addition, starting from the
    /// bias and visiting the window channel-major, row-major.
    Narrow16,
}

/// Shift applied by exported layers when nothing better is known: `2 * (q - 1)`.
pub const DEFAULT_OUT_SHIFT: u32 = 14;

/// Largest window for which a 32-bit accumulator cannot overflow.
pub const MAX_WINDOW_LEN: usize = (i32::MAX as usize) / (128 * 128) - 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int8ConvParams {
    pub weights: QuantFilters,
    /// One entry per filter, already at accumulator scale.
    pub bias: Vec<i32>,
    pub stride: usize,
    pub pad: usize,
    pub out_scale_shift: u32,
    pub acc_mode: AccMode,
}

impl Int8ConvParams {
    pub fn validate(&self) -> Result<()> {
        validate_common(&self.weights, &self.bias, self.out_scale_shift)?;
        if self.stride == 0 {
            return Err(Error::param("stride must be >= 1"));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let k = self.weights.shape;
        if k.channels != input.channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                k.channels, input.channels
            )));
        }
        let oh = window_output(input.height, k.height, self.stride, self.pad);
        let ow = window_output(input.width, k.width, self.stride, self.pad);
        match (oh, ow) {
            (Some(h), Some(w)) => Shape::new(k.filters, h, w),
            _ => Err(Error::shape(format!("kernel {k} does not fit input {input}"))),
        }
    }
}

/// Fully connected int8 layer; each filter window spans the whole input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Int8FcParams {
    pub weights: QuantFilters,
    pub bias: Vec<i32>,
    pub out_scale_shift: u32,
    pub acc_mode: AccMode,
}

impl Int8FcParams {
    pub fn validate(&self) -> Result<()> {
        validate_common(&self.weights, &self.bias, self.out_scale_shift)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.weights.shape.window() != input {
            return Err(Error::shape(format!(
                "fc expects input {}, got {input}",
                self.weights.shape.window()
            )));
        }
        Shape::vector(self.weights.shape.filters)
    }
}

fn validate_common(weights: &QuantFilters, bias: &[i32], shift: u32) -> Result<()> {
    if shift > 31 {
        return Err(Error::param(format!("out_scale_shift {shift} exceeds 31")));
    }
    if bias.len() != weights.shape.filters {
        return Err(Error::shape(format!(
            "bias length {} does not match {} filters",
            bias.len(),
            weights.shape.filters
        )));
    }
    if weights.shape.window_len() > MAX_WINDOW_LEN {
        return Err(Error::param("filter window too large for a 32-bit accumulator"));
    }
    Ok(())
}

fn output_scale(x: &QuantTensor, w: &QuantFilters, shift: u32) -> Result<i32> {
    let exp = x.scale_exp() + w.scale_exp + shift as i32;
    crate::tensor::check_scale_exp(exp).map_err(|_| {
        Error::param(format!(
            "output scale exponent {exp} out of range (input {}, weights {}, shift {shift})",
            x.scale_exp(),
            w.scale_exp
        ))
    })?;
    Ok(exp)
}

/// `saturate_int8(round_half_away_from_zero(acc / 2^shift))`.
#[inline]
pub fn requantize(acc: i32, shift: u32) -> i8 {
    let acc = acc as i64;
    let v = if shift == 0 {
        acc
    } else {
        let half = 1i64 << (shift - 1);
        if acc >= 0 {
            (acc + half) >> shift
        } else {
            -((-acc + half) >> shift)
        }
    };
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

#[inline]
fn sat16(v: i32) -> i32 {
    v.clamp(i16::MIN as i32, i16::MAX as i32)
}

/// Running accumulator for one output element.
struct Acc {
    mode: AccMode,
    value: i32,
}

impl Acc {
    #[inline]
    fn new(mode: AccMode, bias: i32) -> Self {
        let value = match mode {
            AccMode::Wide => bias,
            AccMode::Narrow16 => sat16(bias),
        };
        Acc { mode, value }
    }

    #[inline]
    fn add(&mut self, p: i32) {
        match self.mode {
            AccMode::Wide => self.value += p,
            AccMode::Narrow16 => self.value = sat16(self.value + p),
        }
    }
}

pub fn conv2d_int8(x: &QuantTensor, p: &Int8ConvParams) -> Result<QuantTensor> {
    p.validate()?;
    let out_shape = p.output_shape(x.shape())?;
    let out_exp = output_scale(x, &p.weights, p.out_scale_shift)?;
    let out = conv_accumulators(x, p, out_shape)
        .into_iter()
        .map(|acc| requantize(acc, p.out_scale_shift))
        .collect();
    QuantTensor::new(out_shape, out, out_exp)
}

/// Raw accumulator values of a convolution, before requantization.
pub(crate) fn conv_accumulators(x: &QuantTensor, p: &Int8ConvParams, out_shape: Shape) -> Vec<i32> {
    let s = x.shape();
    let k = p.weights.shape;
    let xd = x.data();
    let mut out = Vec::with_capacity(out_shape.len());
    for f in 0..k.filters {
        let filt = p.weights.filter(f);
        for oy in 0..out_shape.height {
            let y0 = (oy * p.stride) as isize - p.pad as isize;
            for ox in 0..out_shape.width {
                let x0 = (ox * p.stride) as isize - p.pad as isize;
                let mut acc = Acc::new(p.acc_mode, p.bias[f]);
                for c in 0..k.channels {
                    for ky in 0..k.height {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= s.height as isize {
                            continue;
                        }
                        let row = (c * s.height + iy as usize) * s.width;
                        let wrow = (c * k.height + ky) * k.width;
                        for kx in 0..k.width {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= s.width as isize {
                                continue;
                            }
                            acc.add(xd[row + ix as usize] as i32 * filt[wrow + kx] as i32);
                        }
                    }
                }
                out.push(acc.value);
            }
        }
    }
    out
}

pub(crate) fn fc_accumulators(x: &QuantTensor, p: &Int8FcParams) -> Vec<i32> {
    (0..p.weights.shape.filters)
        .map(|f| {
            let mut acc = Acc::new(p.acc_mode, p.bias[f]);
            for (&a, &b) in x.data().iter().zip(p.weights.filter(f)) {
                acc.add(a as i32 * b as i32);
            }
            acc.value
        })
        .collect()
}

pub fn fc_int8(x: &QuantTensor, p: &Int8FcParams) -> Result<QuantTensor> {
    p.validate()?;
    let out_shape = p.output_shape(x.shape())?;
    let out_exp = output_scale(x, &p.weights, p.out_scale_shift)?;
    let out = fc_accumulators(x, p)
        .into_iter()
        .map(|acc| requantize(acc, p.out_scale_shift))
        .collect();
    QuantTensor::new(out_shape, out, out_exp)
}

pub fn maxpool_int8(x: &QuantTensor, kernel: usize, stride: usize) -> Result<QuantTensor> {
    let s = x.shape();
    let (oh, ow) = pool_dims(s, kernel, stride)?;
    let out_shape = Shape::new(s.channels, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = i8::MIN;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(x.at(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                out.push(m);
            }
        }
    }
    QuantTensor::new(out_shape, out, x.scale_exp())
}

pub fn relu_int8(x: &QuantTensor) -> QuantTensor {
    let data = x.data().iter().map(|&v| v.max(0)).collect();
    QuantTensor::new(x.shape(), data, x.scale_exp()).expect("relu preserves shape and scale")
}
