//! Binarized execution path.
//!
//! A set bit encodes `+1` and a clear bit `-1`. For a filter window of `n`
//! valid bits, `pc = popcount(xnor(X, W))` counts agreements and the bipolar
//! dot product is `d = 2 * pc - n`. A binary convolution output is
//! `alpha_f * 2^alpha_scale_exp * d`.
//!
//! Batch norm followed by sign binarization collapses into one comparison per
//! channel against `c = mean - beta / gamma * sqrt(var + eps)`, accepting
//! `x >= c` when `gamma > 0` and `x <= c` when `gamma < 0`. Combined with the
//! affine map above, the whole thing reduces to an integer popcount threshold.

use crate::error::{Error, Result};
use crate::float_ref::{pool_dims, BatchNorm};
use crate::tensor::{
    check_scale_exp, pow2, quantize_scalar, window_output, words_for, BitRole, BitTensor,
    FloatTensor, KernelShape, QuantTensor, Shape,
};

/// Largest filter window; keeps `alpha * d` exact in an f32 mantissa.
pub const MAX_BIN_WINDOW: usize = 1 << 16;

/// Per-filter bit-packed weights, each padded with ones to a word boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinFilters {
    shape: KernelShape,
    filters: Vec<BitTensor>,
}

impl BinFilters {
    pub fn new(shape: KernelShape, filters: Vec<BitTensor>) -> Result<Self> {
        if filters.len() != shape.filters {
            return Err(Error::shape(format!(
                "{} packed filters for a bank of {}",
                filters.len(),
                shape.filters
            )));
        }
        for f in &filters {
            if f.shape() != shape.window() || f.role() != BitRole::Weight {
                return Err(Error::shape("packed filter must be a weight tensor of window shape"));
            }
        }
        Ok(BinFilters { shape, filters })
    }

    /// Packs `{0,1}` weights laid out filter-major, then CHW.
    pub fn from_bits(shape: KernelShape, bits: &[u8]) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::shape("bit count does not match filter bank"));
        }
        let n = shape.window_len();
        let filters = bits
            .chunks(n)
            .map(|chunk| crate::tensor::pack_bits(chunk, shape.window(), BitRole::Weight))
            .collect::<Result<Vec<_>>>()?;
        Ok(BinFilters { shape, filters })
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn filter(&self, f: usize) -> &BitTensor {
        &self.filters[f]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BitTensor> {
        self.filters.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinConvParams {
    pub weights: BinFilters,
    /// Per-filter scale, sharing `alpha_scale_exp`.
    pub alpha: Vec<i8>,
    pub alpha_scale_exp: i32,
    pub stride: usize,
}

impl BinConvParams {
    /// Valid bits per filter window (`c * kh * kw`).
    pub fn n_effective(&self) -> usize {
        self.weights.shape.window_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.weights.shape.filters {
            return Err(Error::shape("alpha length must equal filter count"));
        }
        check_scale_exp(self.alpha_scale_exp)?;
        if self.stride == 0 {
            return Err(Error::param("stride must be >= 1"));
        }
        if self.n_effective() > MAX_BIN_WINDOW {
            return Err(Error::param("binary filter window too large"));
        }
        Ok(())
    }

    /// Binary convolutions are valid-only: no spatial padding.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let k = self.weights.shape;
        if k.channels != input.channels {
            return Err(Error::shape(format!(
                "binary conv expects {} channels, got {}",
                k.channels, input.channels
            )));
        }
        let oh = window_output(input.height, k.height, self.stride, 0);
        let ow = window_output(input.width, k.width, self.stride, 0);
        match (oh, ow) {
            (Some(h), Some(w)) => Shape::new(k.filters, h, w),
            _ => Err(Error::shape(format!("kernel {k} does not fit input {input}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Bit is 1 when `x >= c`.
    AtLeast,
    /// Bit is 1 when `x <= c`.
    AtMost,
}

/// Fused batch-norm + sign binarization, one threshold per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinActParams {
    pub thresholds: Vec<i8>,
    pub scale_exp: i32,
    pub directions: Vec<Direction>,
}

impl BinActParams {
    pub fn channels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.len() != self.directions.len() {
            return Err(Error::shape("one threshold and one direction per channel required"));
        }
        check_scale_exp(self.scale_exp)
    }

    /// Real value of channel `ch`'s threshold.
    pub fn threshold(&self, ch: usize) -> f64 {
        self.thresholds[ch] as f64 * pow2(self.scale_exp)
    }

    #[inline]
    fn accepts(&self, ch: usize, x: f64) -> bool {
        let c = self.threshold(ch);
        match self.directions[ch] {
            Direction::AtLeast => x >= c,
            Direction::AtMost => x <= c,
        }
    }
}

/// Folds batch-norm parameters into per-channel int8 thresholds.
///
/// The shared scale exponent is the finest one that represents every
/// threshold without saturation.
pub fn fuse_batchnorm(bn: &BatchNorm) -> Result<BinActParams> {
    bn.validate()?;
    let mut real = Vec::with_capacity(bn.channels());
    let mut directions = Vec::with_capacity(bn.channels());
    for ch in 0..bn.channels() {
        let gamma = bn.gamma[ch] as f64;
        if gamma == 0.0 {
            return Err(Error::DegenerateChannel { channel: ch });
        }
        let std = (bn.var[ch] as f64 + bn.eps as f64).sqrt();
        real.push(bn.mean[ch] as f64 - bn.beta[ch] as f64 / gamma * std);
        directions.push(if gamma > 0.0 { Direction::AtLeast } else { Direction::AtMost });
    }
    if real.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("fused threshold is not finite".into()));
    }
    let scale_exp = threshold_scale(&real);
    let thresholds = real.iter().map(|&c| quantize_scalar(c, scale_exp)).collect();
    Ok(BinActParams { thresholds, scale_exp, directions })
}

fn threshold_scale(values: &[f64]) -> i32 {
    let max = values.iter().fold(0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return -7;
    }
    let mut exp = ((max / 127.0).log2().ceil() as i32).clamp(-31, 0);
    while exp < 0 && (max / pow2(exp)).round() > 127.0 {
        exp += 1;
    }
    exp
}

/// Binarizes a real-valued map against per-channel thresholds.
pub fn binact(pre: &FloatTensor, p: &BinActParams) -> Result<BitTensor> {
    p.validate()?;
    let s = pre.shape();
    if p.channels() != s.channels {
        return Err(Error::shape(format!(
            "{} thresholds for {} channels",
            p.channels(),
            s.channels
        )));
    }
    let plane = s.plane();
    let mut words = vec![0u32; words_for(s.len())];
    for (i, &x) in pre.data().iter().enumerate() {
        if p.accepts(i / plane, x as f64) {
            words[i / 32] |= 1 << (i % 32);
        }
    }
    Ok(BitTensor::from_words_normalized(s, words, BitRole::Activation))
}

/// Binarizes the dequantized output of an int8 layer.
pub fn binact_bridge(x: &QuantTensor, p: &BinActParams) -> Result<BitTensor> {
    binact(&x.dequantize(), p)
}

/// Re-expands bits to int8 `-1/+1` at scale `2^0`, for int8 layers fed by binary ones.
pub fn bipolar_to_int8(x: &BitTensor) -> QuantTensor {
    let data = (0..x.valid_bits()).map(|i| if x.bit(i) { 1 } else { -1 }).collect();
    QuantTensor::new(x.shape(), data, 0).expect("shape already validated")
}

/// Window max over bits, i.e. a logical OR.
pub fn maxpool_bits(x: &BitTensor, kernel: usize, stride: usize) -> Result<BitTensor> {
    let s = x.shape();
    let (oh, ow) = pool_dims(s, kernel, stride)?;
    let out_shape = Shape::new(s.channels, oh, ow)?;
    let mut words = vec![0u32; words_for(out_shape.len())];
    let mut i = 0;
    for c in 0..s.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let any = (0..kernel).any(|ky| {
                    (0..kernel).any(|kx| x.bit_at(c, oy * stride + ky, ox * stride + kx))
                });
                if any {
                    words[i / 32] |= 1 << (i % 32);
                }
                i += 1;
            }
        }
    }
    Ok(BitTensor::from_words_normalized(out_shape, words, BitRole::Activation))
}

/// Appends bits to a word buffer, LSB first.
struct BitWriter<'a> {
    words: &'a mut [u32],
    pos: usize,
}

impl BitWriter<'_> {
    #[inline]
    fn push(&mut self, bits: u32, len: usize) {
        debug_assert!(len <= 32);
        if len == 0 {
            return;
        }
        let bits = if len == 32 { bits } else { bits & ((1u32 << len) - 1) };
        let (w, off) = (self.pos / 32, self.pos % 32);
        self.words[w] |= bits << off;
        if off + len > 32 {
            self.words[w + 1] |= bits >> (32 - off);
        }
        self.pos += len;
    }
}

/// Reads up to 32 bits starting at logical position `start`.
#[inline]
fn read_bits(words: &[u32], start: usize, len: usize) -> u32 {
    let (w, off) = (start / 32, start % 32);
    let mut v = words[w] >> off;
    if off + len > 32 {
        v |= words[w + 1] << (32 - off);
    }
    v
}

/// Calls `visit(oy, ox, window_words)` for every output position, where
/// `window_words` holds that position's input window packed in filter order
/// with zero pads.
fn for_each_window(
    x: &BitTensor,
    k: KernelShape,
    stride: usize,
    out: Shape,
    mut visit: impl FnMut(usize, usize, &[u32]),
) {
    let s = x.shape();
    let mut buf = vec![0u32; words_for(k.window_len())];
    for oy in 0..out.height {
        for ox in 0..out.width {
            buf.iter_mut().for_each(|w| *w = 0);
            let mut writer = BitWriter { words: &mut buf, pos: 0 };
            for c in 0..k.channels {
                for ky in 0..k.height {
                    let mut start = s.index(c, oy * stride + ky, ox * stride);
                    let mut left = k.width;
                    while left > 0 {
                        let take = left.min(32);
                        writer.push(read_bits(x.words(), start, take), take);
                        start += take;
                        left -= take;
                    }
                }
            }
            visit(oy, ox, &buf);
        }
    }
}

#[inline]
fn xnor_popcount(a: &[u32], w: &[u32]) -> u32 {
    a.iter().zip(w).map(|(a, w)| (!(a ^ w)).count_ones()).sum()
}

/// Binary convolution producing the real-valued pre-activation map.
pub fn binconv2d(x: &BitTensor, p: &BinConvParams) -> Result<FloatTensor> {
    p.validate()?;
    let out_shape = p.output_shape(x.shape())?;
    let k = p.weights.shape;
    let n = p.n_effective() as i64;
    let scale = pow2(p.alpha_scale_exp);
    let mut out = vec![0f32; out_shape.len()];
    for_each_window(x, k, p.stride, out_shape, |oy, ox, window| {
        for (f, w) in p.weights.iter().enumerate() {
            let pc = xnor_popcount(window, w.words()) as i64;
            let d = 2 * pc - n;
            out[out_shape.index(f, oy, ox)] = (p.alpha[f] as f64 * scale * d as f64) as f32;
        }
    });
    FloatTensor::new(out_shape, out)
}

/// Per-filter decision on the popcount `pc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopcountRule {
    AtLeast(i64),
    AtMost(i64),
    Constant(bool),
}

impl PopcountRule {
    #[inline]
    pub fn apply(self, pc: i64) -> bool {
        match self {
            PopcountRule::AtLeast(t) => pc >= t,
            PopcountRule::AtMost(t) => pc <= t,
            PopcountRule::Constant(b) => b,
        }
    }
}

fn floor_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if a % b != 0 && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -floor_div(-a, b)
}

/// Derives the integer popcount rule of every filter.
///
/// With `a = alpha * 2^(ea - m)` and `r = c * 2^(ec - m)`, `m = min(ea, ec)`,
/// the comparison `alpha * 2^ea * (2 pc - n) >= c * 2^ec` becomes
/// `a * (2 pc - n) >= r` in exact integers.
pub fn popcount_rules(p: &BinConvParams, a: &BinActParams) -> Result<Vec<PopcountRule>> {
    p.validate()?;
    a.validate()?;
    let filters = p.weights.shape.filters;
    if a.channels() != filters {
        return Err(Error::shape(format!(
            "{} thresholds for {filters} binary filters",
            a.channels()
        )));
    }
    let n = p.n_effective() as i64;
    let m = p.alpha_scale_exp.min(a.scale_exp);
    let rules = (0..filters)
        .map(|f| {
            let coef = (p.alpha[f] as i64) << (p.alpha_scale_exp - m);
            let rhs = (a.thresholds[f] as i64) << (a.scale_exp - m);
            // accept when coef * d (>= or <=) rhs, d = 2 pc - n
            let at_least = a.directions[f] == Direction::AtLeast;
            if coef == 0 {
                return PopcountRule::Constant(if at_least { 0 >= rhs } else { 0 <= rhs });
            }
            // normalize to `d >= bound` or `d <= bound`
            let d_at_least = at_least == (coef > 0);
            if d_at_least {
                let bound = ceil_div(rhs, coef);
                PopcountRule::AtLeast(ceil_div(bound + n, 2))
            } else {
                let bound = floor_div(rhs, coef);
                PopcountRule::AtMost(floor_div(bound + n, 2))
            }
        })
        .collect();
    Ok(rules)
}

/// Binary convolution fused with binarization; integer arithmetic only.
pub fn binconv_thresholded(
    x: &BitTensor,
    p: &BinConvParams,
    a: &BinActParams,
) -> Result<BitTensor> {
    let rules = popcount_rules(p, a)?;
    let out_shape = p.output_shape(x.shape())?;
    let mut words = vec![0u32; words_for(out_shape.len())];
    for_each_window(x, p.weights.shape, p.stride, out_shape, |oy, ox, window| {
        for (f, w) in p.weights.iter().enumerate() {
            let pc = xnor_popcount(window, w.words()) as i64;
            if rules[f].apply(pc) {
                let i = out_shape.index(f, oy, ox);
                words[i / 32] |= 1 << (i % 32);
            }
        }
    });
    Ok(BitTensor::from_words_normalized(out_shape, words, BitRole::Activation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{pack_bits, unpack_bits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn act(bits: &[u8], shape: (usize, usize, usize)) -> BitTensor {
        pack_bits(bits, Shape::new(shape.0, shape.1, shape.2).unwrap(), BitRole::Activation)
            .unwrap()
    }

    fn params(k: KernelShape, bits: &[u8], alpha: Vec<i8>, exp: i32) -> BinConvParams {
        BinConvParams {
            weights: BinFilters::from_bits(k, bits).unwrap(),
            alpha,
            alpha_scale_exp: exp,
            stride: 1,
        }
    }

    fn ge(thr: Vec<i8>, exp: i32) -> BinActParams {
        let n = thr.len();
        BinActParams { thresholds: thr, scale_exp: exp, directions: vec![Direction::AtLeast; n] }
    }

    #[test]
    fn four_bit_example() {
        let x = act(&[1, 1, 0, 1], (1, 1, 4));
        let p = params(KernelShape::new(1, 1, 1, 4).unwrap(), &[1, 0, 0, 1], vec![1], 0);
        let y = binconv2d(&x, &p).unwrap();
        // (+1*+1) + (+1*-1) + (-1*-1) + (+1*+1)
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn self_correlation_is_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let bits: Vec<u8> = (0..75).map(|_| rng.gen_range(0..2)).collect();
        let x = act(&bits, (3, 5, 5));
        let p = params(KernelShape::new(1, 3, 5, 5).unwrap(), &bits, vec![1], 0);
        assert_eq!(binconv2d(&x, &p).unwrap().data(), &[75.0]);
    }

    #[test]
    fn binconv_rejects_shape_mismatch() {
        let x = act(&[1; 8], (2, 2, 2));
        let p = params(KernelShape::new(1, 1, 2, 2).unwrap(), &[1; 4], vec![1], 0);
        assert!(matches!(binconv2d(&x, &p), Err(Error::Shape(_))));
        let p = params(KernelShape::new(1, 2, 3, 3).unwrap(), &[1; 18], vec![1], 0);
        assert!(binconv2d(&x, &p).is_err());
    }

    #[test]
    fn fuse_examples() {
        let bn = BatchNorm {
            mean: vec![0.0, 1.0],
            var: vec![3.7, 0.0],
            gamma: vec![1.0, 1.0],
            beta: vec![0.0, 0.0],
            eps: 0.0,
        };
        let a = fuse_batchnorm(&bn).unwrap();
        assert_eq!(a.threshold(0), 0.0);
        assert_eq!(a.threshold(1), 1.0);
        assert_eq!(a.directions, vec![Direction::AtLeast; 2]);

        let neg = BatchNorm { gamma: vec![-2.0, 1.0], ..bn.clone() };
        assert_eq!(fuse_batchnorm(&neg).unwrap().directions[0], Direction::AtMost);

        let zero = BatchNorm { gamma: vec![1.0, 0.0], ..bn };
        assert!(matches!(fuse_batchnorm(&zero), Err(Error::DegenerateChannel { channel: 1 })));
    }

    #[test]
    fn threshold_scale_avoids_saturation() {
        assert_eq!(threshold_scale(&[1.0]), -6);
        assert_eq!(threshold_scale(&[0.0]), -7);
        assert_eq!(threshold_scale(&[500.0]), 0);
        let e = threshold_scale(&[0.3, -0.9]);
        assert!((0.9 / pow2(e)).round() <= 127.0);
        assert!((0.9 / pow2(e - 1)).round() > 127.0);
    }

    #[test]
    fn binact_examples() {
        let x = FloatTensor::new(Shape::new(1, 1, 3).unwrap(), vec![-1.0, 0.0, 1.0]).unwrap();
        let p = ge(vec![0], 0);
        assert_eq!(unpack_bits(&binact(&x, &p).unwrap()), vec![0, 1, 1]);
        let p = BinActParams { directions: vec![Direction::AtMost], ..p };
        assert_eq!(unpack_bits(&binact(&x, &p).unwrap()), vec![1, 1, 0]);
    }

    #[test]
    fn majority_threshold_at_n4() {
        let k = KernelShape::new(1, 1, 1, 4).unwrap();
        let p = params(k, &[1, 0, 1, 1], vec![1], 0);
        let rules = popcount_rules(&p, &ge(vec![0], 0)).unwrap();
        assert_eq!(rules, vec![PopcountRule::AtLeast(2)]);
        // enumerate every 4-bit input: d = 2pc - 4 >= 0 exactly when pc >= 2
        for v in 0..16u8 {
            let bits: Vec<u8> = (0..4).map(|i| (v >> i) & 1).collect();
            let x = act(&bits, (1, 1, 4));
            let pc = bits.iter().zip([1, 0, 1, 1]).filter(|(a, b)| **a == *b).count() as i64;
            let fused = binconv_thresholded(&x, &p, &ge(vec![0], 0)).unwrap();
            assert_eq!(fused.bit(0), pc >= 2);
            assert_eq!(fused.bit(0), 2 * pc - 4 >= 0);
        }
    }

    #[test]
    fn odd_window_uses_ceiling() {
        let k = KernelShape::new(1, 1, 1, 5).unwrap();
        let p = params(k, &[1; 5], vec![1], 0);
        assert_eq!(popcount_rules(&p, &ge(vec![0], 0)).unwrap(), vec![PopcountRule::AtLeast(3)]);
    }

    #[test]
    fn negative_alpha_flips_and_zero_alpha_is_constant() {
        let k = KernelShape::new(3, 1, 1, 4).unwrap();
        let p = params(k, &[1; 12], vec![-1, 0, 0], 0);
        let a = ge(vec![0, 0, 1], 0);
        let rules = popcount_rules(&p, &a).unwrap();
        assert_eq!(rules[0], PopcountRule::AtMost(2));
        assert_eq!(rules[1], PopcountRule::Constant(true));
        assert_eq!(rules[2], PopcountRule::Constant(false));
    }

    #[test]
    fn bit_maxpool_is_or() {
        let x = act(&[0, 0, 0, 1, 0, 0, 0, 0], (2, 2, 2));
        assert_eq!(unpack_bits(&maxpool_bits(&x, 2, 2).unwrap()), vec![1, 0]);
    }

    #[test]
    fn bipolar_expansion() {
        let x = act(&[1, 0, 1], (3, 1, 1));
        assert_eq!(bipolar_to_int8(&x).data(), &[1, -1, 1]);
    }

    #[test]
    fn bit_writer_crosses_words() {
        let mut buf = [0u32; 2];
        let mut w = BitWriter { words: &mut buf, pos: 0 };
        w.push(0x7, 30);
        w.push(0xF, 4);
        assert_eq!(buf, [0x7 | 0x3 << 30, 0x3]);
        assert_eq!(read_bits(&buf, 30, 4) & 0xF, 0xF);
    }
}
