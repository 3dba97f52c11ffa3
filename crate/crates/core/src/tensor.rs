//! Tensor containers: float, int8 fixed-point and bit-packed.
//!
//! All tensors are stored channel-major, row-major (CHW). Bit tensors pack
//! logical bit `i` into word `i / 32` at bit position `i % 32` (LSB first).
//! Positions past the logical length in the last word are pad bits: `0` for
//! activations and `1` for weights, so `xnor(pad_act, pad_weight) == 0` and
//! pads never contribute to a popcount.

use crate::error::{Error, Result};

/// Smallest and largest allowed power-of-two scale exponent.
pub const MIN_SCALE_EXP: i32 = -31;
pub const MAX_SCALE_EXP: i32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "dimensions must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let count = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .filter(|&v| v <= u32::MAX as usize);
        if count.is_none() {
            return Err(Error::shape(format!(
                "element count of {channels}x{height}x{width} exceeds u32"
            )));
        }
        Ok(Shape { channels, height, width })
    }

    /// Rank-1 shape `(n, 1, 1)`.
    pub fn vector(n: usize) -> Result<Self> {
        Shape::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dimensions of a bank of convolution filters (`filters x channels x kh x kw`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelShape {
    pub filters: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl KernelShape {
    pub fn new(filters: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if filters == 0 {
            return Err(Error::shape("filter count must be >= 1"));
        }
        let window = Shape::new(channels, height, width)?;
        window
            .len()
            .checked_mul(filters)
            .filter(|&v| v <= u32::MAX as usize)
            .ok_or_else(|| Error::shape("filter bank element count exceeds u32"))?;
        Ok(KernelShape { filters, channels, height, width })
    }

    /// Shape of one filter.
    pub fn window(&self) -> Shape {
        Shape { channels: self.channels, height: self.height, width: self.width }
    }

    /// Elements per filter window (`c * kh * kw`).
    pub fn window_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.filters * self.window_len()
    }
}

impl std::fmt::Display for KernelShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.filters, self.channels, self.height, self.width)
    }
}

/// Output spatial size of a sliding window, or `None` if the window does not fit.
pub fn window_output(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input.checked_add(pad.checked_mul(2)?)?;
    if kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_len(shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at index {i}")));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        FloatTensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(c, y, x)]
    }
}

/// Signed 8-bit payload; element value is `data[i] * 2^scale_exp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantTensor {
    shape: Shape,
    data: Vec<i8>,
    scale_exp: i32,
}

impl QuantTensor {
    pub fn new(shape: Shape, data: Vec<i8>, scale_exp: i32) -> Result<Self> {
        check_len(shape, data.len())?;
        check_scale_exp(scale_exp)?;
        Ok(QuantTensor { shape, data, scale_exp })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale_exp(&self) -> i32 {
        self.scale_exp
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn dequantize(&self) -> FloatTensor {
        let step = pow2(self.scale_exp);
        FloatTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| (v as f64 * step) as f32).collect(),
        }
    }

    /// Canonical byte image: shape as three LE u32, scale exponent, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.data.len());
        for d in [self.shape.channels, self.shape.height, self.shape.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.scale_exp as i8 as u8);
        out.extend(self.data.iter().map(|&v| v as u8));
        out
    }
}

pub fn check_scale_exp(scale_exp: i32) -> Result<()> {
    if !(MIN_SCALE_EXP..=MAX_SCALE_EXP).contains(&scale_exp) {
        return Err(Error::param(format!(
            "scale exponent {scale_exp} outside [{MIN_SCALE_EXP}, {MAX_SCALE_EXP}]"
        )));
    }
    Ok(())
}

fn check_len(shape: Shape, len: usize) -> Result<()> {
    if shape.len() != len {
        return Err(Error::shape(format!(
            "data length {len} does not match shape {shape} ({} elements)",
            shape.len()
        )));
    }
    Ok(())
}

pub(crate) fn pow2(exp: i32) -> f64 {
    2f64.powi(exp)
}

/// Saturating int8 quantization of one real value at the given scale.
pub fn quantize_scalar(value: f64, scale_exp: i32) -> i8 {
    let scaled = (value / pow2(scale_exp)).round();
    scaled.clamp(i8::MIN as f64, i8::MAX as f64) as i8
}

/// Element-wise `clamp(round_half_away(f / 2^scale_exp), -128, 127)`.
pub fn quantize(f: &FloatTensor, scale_exp: i32) -> Result<QuantTensor> {
    check_scale_exp(scale_exp)?;
    if let Some(i) = f.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value at index {i}")));
    }
    let data = f.data.iter().map(|&v| quantize_scalar(v as f64, scale_exp)).collect();
    Ok(QuantTensor { shape: f.shape, data, scale_exp })
}

/// Whether a bit tensor holds activations or weights; decides the pad value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitRole {
    Activation,
    Weight,
}

impl BitRole {
    fn pad_word(self) -> u32 {
        match self {
            BitRole::Activation => 0,
            BitRole::Weight => u32::MAX,
        }
    }
}

/// Bit-packed `{0,1}` tensor. A set bit encodes `+1`, a clear bit `-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Shape,
    words: Vec<u32>,
    role: BitRole,
}

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(32)
}

/// Mask of the pad positions in the last word, or 0 when bits fill it exactly.
pub(crate) fn pad_mask(valid_bits: usize) -> u32 {
    match valid_bits % 32 {
        0 => 0,
        r => u32::MAX << r,
    }
}

impl BitTensor {
    /// Builds a tensor from already-packed words, checking the pad convention.
    pub fn from_words(shape: Shape, words: Vec<u32>, role: BitRole) -> Result<Self> {
        let valid = shape.len();
        if words.len() != words_for(valid) {
            return Err(Error::shape(format!(
                "{} words cannot hold {valid} bits",
                words.len()
            )));
        }
        let mask = pad_mask(valid);
        let last = *words.last().expect("shape has at least one element");
        if last & mask != role.pad_word() & mask {
            return Err(Error::param("pad bits violate role convention"));
        }
        Ok(BitTensor { shape, words, role })
    }

    /// Builds a tensor from words whose pad bits are not yet normalized.
    pub(crate) fn from_words_normalized(shape: Shape, mut words: Vec<u32>, role: BitRole) -> Self {
        debug_assert_eq!(words.len(), words_for(shape.len()));
        let mask = pad_mask(shape.len());
        if let Some(last) = words.last_mut() {
            *last = (*last & !mask) | (role.pad_word() & mask);
        }
        BitTensor { shape, words, role }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn valid_bits(&self) -> usize {
        self.shape.len()
    }

    pub fn role(&self) -> BitRole {
        self.role
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.valid_bits());
        (self.words[i / 32] >> (i % 32)) & 1 == 1
    }

    #[inline]
    pub fn bit_at(&self, c: usize, y: usize, x: usize) -> bool {
        self.bit(self.shape.index(c, y, x))
    }

    /// Canonical byte image: shape, role tag, then words little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 4 * self.words.len());
        for d in [self.shape.channels, self.shape.height, self.shape.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(match self.role {
            BitRole::Activation => 0,
            BitRole::Weight => 1,
        });
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }
}

/// Packs `{0,1}` values LSB-first into 32-bit words.
pub fn pack_bits(values: &[u8], shape: Shape, role: BitRole) -> Result<BitTensor> {
    check_len(shape, values.len())?;
    let mut words = vec![0u32; words_for(values.len())];
    for (i, &v) in values.iter().enumerate() {
        match v {
            0 => {}
            1 => words[i / 32] |= 1 << (i % 32),
            other => {
                return Err(Error::param(format!("bit value {other} at index {i} is not 0 or 1")))
            }
        }
    }
    Ok(BitTensor::from_words_normalized(shape, words, role))
}

pub fn unpack_bits(t: &BitTensor) -> Vec<u8> {
    (0..t.valid_bits()).map(|i| t.bit(i) as u8).collect()
}

/// A bank of real-valued filters stored filter-major, then CHW.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatFilters {
    pub shape: KernelShape,
    pub data: Vec<f32>,
}

impl FloatFilters {
    pub fn new(shape: KernelShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "filter data length {} does not match {shape}",
                data.len()
            )));
        }
        Ok(FloatFilters { shape, data })
    }

    pub fn filter(&self, f: usize) -> &[f32] {
        let n = self.shape.window_len();
        &self.data[f * n..(f + 1) * n]
    }
}

/// A bank of int8 filters sharing one scale exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantFilters {
    pub shape: KernelShape,
    pub data: Vec<i8>,
    pub scale_exp: i32,
}

impl QuantFilters {
    pub fn new(shape: KernelShape, data: Vec<i8>, scale_exp: i32) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "filter data length {} does not match {shape}",
                data.len()
            )));
        }
        check_scale_exp(scale_exp)?;
        Ok(QuantFilters { shape, data, scale_exp })
    }

    pub fn filter(&self, f: usize) -> &[i8] {
        let n = self.shape.window_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn dequantize(&self) -> FloatFilters {
        let step = pow2(self.scale_exp);
        FloatFilters {
            shape: self.shape,
            data: self.data.iter().map(|&v| (v as f64 * step) as f32).collect(),
        }
    }
}
