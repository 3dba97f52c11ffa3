//! The `.cpnt` container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "CPNT"  version:u16  arm_count:u8(=2)  reserved:u8(=0)
//! input: c:u32 h:u32 w:u32   num_classes:u32
//! label_count:u16  { len:u8 utf8 }*
//! per arm (bnn, then int8):
//!     arm:u8  layer_count:u16
//!     { kind:u8  name_len:u8 name  param_len:u32 params }*
//! crc32 of all preceding bytes:u32
//! ```

use std::io::Write;
use std::path::Path;

use super::{ArmKind, CoopModel, Layer, LayerKind, LayerSpec, ModelGraph};
use crate::bnn::{BinActParams, BinConvParams, BinFilters, Direction};
use crate::error::{Error, FormatError, Result};
use crate::int8::{AccMode, Int8ConvParams, Int8FcParams};
use crate::tensor::{BitRole, BitTensor, KernelShape, QuantFilters, Shape};

pub const MAGIC: &[u8; 4] = b"CPNT";
pub const FORMAT_VERSION: u16 = 1;

pub fn to_bytes(m: &CoopModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(2);
    w.u8(0);
    let s = m.input_shape();
    w.u32(s.channels as u32);
    w.u32(s.height as u32);
    w.u32(s.width as u32);
    w.u32(m.num_classes() as u32);
    let labels = m.class_labels().unwrap_or(&[]);
    w.u16(labels.len() as u16);
    for label in labels {
        w.u8(label.len() as u8);
        w.bytes(label.as_bytes());
    }
    for graph in [m.bnn(), m.int8()] {
        w.u8(arm_tag(graph.arm()));
        w.u16(graph.layers().len() as u16);
        for spec in graph.layers() {
            w.u8(spec.kind().tag());
            w.u8(spec.name.len() as u8);
            w.bytes(spec.name.as_bytes());
            let mut params = Writer::default();
            write_params(&mut params, &spec.layer);
            w.u32(params.buf.len() as u32);
            w.bytes(&params.buf);
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

/// Writes the canonical encoding; returns the byte count.
pub fn save(m: &CoopModel, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = to_bytes(m);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn load(path: impl AsRef<Path>) -> Result<CoopModel> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<CoopModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() >= 6 {
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
    }
    if bytes.len() < 12 {
        // too short to hold a header and checksum
        return Err(FormatError::Checksum { stored: 0, computed: crc32fast::hash(bytes) }.into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed }.into());
    }
    parse_body(body)
}

fn parse_body(body: &[u8]) -> Result<CoopModel> {
    let mut r = Reader { buf: body, pos: 6 };
    let arms = r.u8()?;
    if arms != 2 {
        return Err(malformed(format!("expected 2 arms, found {arms}")));
    }
    if r.u8()? != 0 {
        return Err(malformed("reserved byte must be zero"));
    }
    let (c, h, w) = (r.dim()?, r.dim()?, r.dim()?);
    let input = Shape::new(c, h, w).map_err(|e| malformed(e.to_string()))?;
    let num_classes = r.dim()?;
    let label_count = r.u16()? as usize;
    let labels = if label_count == 0 {
        None
    } else {
        let mut labels = Vec::with_capacity(label_count.min(r.remaining()));
        for _ in 0..label_count {
            let len = r.u8()? as usize;
            let raw = r.take(len)?;
            let label = std::str::from_utf8(raw).map_err(|_| malformed("label is not UTF-8"))?;
            labels.push(label.to_string());
        }
        Some(labels)
    };

    let mut graphs = Vec::with_capacity(2);
    for expected in [ArmKind::Bnn, ArmKind::Int8] {
        let tag = r.u8()?;
        if tag != arm_tag(expected) {
            return Err(malformed(format!("expected {} arm, found tag {tag}", expected.name())));
        }
        let count = r.u16()? as usize;
        let mut layers = Vec::with_capacity(count.min(r.remaining()));
        for _ in 0..count {
            layers.push(read_layer(&mut r)?);
        }
        graphs.push(ModelGraph::new(expected, input, num_classes, layers)?);
    }
    if r.remaining() != 0 {
        return Err(malformed(format!("{} trailing bytes before checksum", r.remaining())));
    }
    let int8 = graphs.pop().expect("two arms parsed");
    let bnn = graphs.pop().expect("two arms parsed");
    CoopModel::new(bnn, int8, labels)
}

fn arm_tag(arm: ArmKind) -> u8 {
    match arm {
        ArmKind::Bnn => 0,
        ArmKind::Int8 => 1,
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    FormatError::Malformed(detail.into()).into()
}

fn read_layer(r: &mut Reader) -> Result<LayerSpec> {
    let tag = r.u8()?;
    let kind = LayerKind::from_tag(tag).ok_or_else(|| malformed(format!("unknown layer kind {tag}")))?;
    let name_len = r.u8()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| malformed("layer name is not UTF-8"))?
        .to_string();
    let param_len = r.u32()? as usize;
    let block = r.take(param_len)?;
    let mut p = Reader { buf: block, pos: 0 };
    let layer = read_params(&mut p, kind).map_err(|e| match e {
        Error::Format(FormatError::Truncated) => {
            malformed(format!("parameter block of `{name}` too short"))
        }
        other => other,
    })?;
    if p.remaining() != 0 {
        return Err(malformed(format!("parameter block of `{name}` has trailing bytes")));
    }
    Ok(LayerSpec { name, layer })
}

fn read_params(r: &mut Reader, kind: LayerKind) -> Result<Layer> {
    let bad = |e: Error| malformed(e.to_string());
    Ok(match kind {
        LayerKind::ConvInt8 => {
            let k = r.kernel()?;
            let stride = r.dim()?;
            let pad = r.dim()?;
            let (weights, shift, acc_mode) = r.quant_filters(k)?;
            let bias = r.i32s(k.filters)?;
            let p = Int8ConvParams { weights, bias, stride, pad, out_scale_shift: shift, acc_mode };
            p.validate().map_err(bad)?;
            Layer::ConvInt8(p)
        }
        LayerKind::FcInt8 => {
            let k = r.kernel()?;
            let (weights, shift, acc_mode) = r.quant_filters(k)?;
            let bias = r.i32s(k.filters)?;
            let p = Int8FcParams { weights, bias, out_scale_shift: shift, acc_mode };
            p.validate().map_err(bad)?;
            Layer::FcInt8(p)
        }
        LayerKind::MaxPool => {
            let kernel = r.dim()?;
            let stride = r.dim()?;
            if kernel == 0 || stride == 0 {
                return Err(malformed("pool kernel and stride must be >= 1"));
            }
            Layer::MaxPool { kernel, stride }
        }
        LayerKind::Relu => Layer::Relu,
        LayerKind::BinConvFused => {
            let k = r.kernel()?;
            let stride = r.dim()?;
            let alpha_scale_exp = r.i8()? as i32;
            let alpha = r.i8s(k.filters)?;
            let act = r.bin_act()?;
            let n = k.window_len();
            let per_filter = n.div_ceil(8);
            let mut filters = Vec::with_capacity(k.filters.min(r.remaining()));
            for _ in 0..k.filters {
                let raw = r.take(per_filter)?;
                filters.push(unpack_weight_bytes(raw, k.window())?);
            }
            let conv = BinConvParams {
                weights: BinFilters::new(k, filters).map_err(bad)?,
                alpha,
                alpha_scale_exp,
                stride,
            };
            conv.validate().map_err(bad)?;
            Layer::BinConvFused { conv, act }
        }
        LayerKind::BinActBridge => Layer::BinActBridge(r.bin_act()?),
        LayerKind::SoftmaxHead => Layer::SoftmaxHead,
    })
}

fn write_params(w: &mut Writer, layer: &Layer) {
    match layer {
        Layer::ConvInt8(p) => {
            w.kernel(p.weights.shape);
            w.u32(p.stride as u32);
            w.u32(p.pad as u32);
            w.quant_filters(&p.weights, p.out_scale_shift, p.acc_mode);
            w.i32s(&p.bias);
        }
        Layer::FcInt8(p) => {
            w.kernel(p.weights.shape);
            w.quant_filters(&p.weights, p.out_scale_shift, p.acc_mode);
            w.i32s(&p.bias);
        }
        Layer::MaxPool { kernel, stride } => {
            w.u32(*kernel as u32);
            w.u32(*stride as u32);
        }
        Layer::Relu | Layer::SoftmaxHead => {}
        Layer::BinConvFused { conv, act } => {
            w.kernel(conv.weights.shape());
            w.u32(conv.stride as u32);
            w.u8(conv.alpha_scale_exp as i8 as u8);
            w.i8s(&conv.alpha);
            w.bin_act(act);
            for f in conv.weights.iter() {
                w.bytes(&pack_weight_bytes(f));
            }
        }
        Layer::BinActBridge(act) => w.bin_act(act),
    }
}

/// Bytes of a packed filter truncated to `ceil(n / 8)`; trailing pad bits are ones.
fn pack_weight_bytes(t: &BitTensor) -> Vec<u8> {
    let n = t.valid_bits().div_ceil(8);
    t.words().iter().flat_map(|w| w.to_le_bytes()).take(n).collect()
}

fn unpack_weight_bytes(raw: &[u8], window: Shape) -> Result<BitTensor> {
    let mut words = vec![0u32; window.len().div_ceil(32)];
    for (i, &b) in raw.iter().enumerate() {
        words[i / 4] |= (b as u32) << (8 * (i % 4));
    }
    // bytes beyond the stored ones are pad, which is all-ones for weights
    let stored_bits = raw.len() * 8;
    if stored_bits % 32 != 0 {
        let last = words.len() - 1;
        words[last] |= u32::MAX << (stored_bits % 32);
    }
    BitTensor::from_words(window, words, BitRole::Weight)
        .map_err(|_| malformed("binary weight pad bits must be 1"))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn i8s(&mut self, v: &[i8]) {
        self.buf.extend(v.iter().map(|&x| x as u8));
    }
    fn i32s(&mut self, v: &[i32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn kernel(&mut self, k: KernelShape) {
        for d in [k.filters, k.channels, k.height, k.width] {
            self.u32(d as u32);
        }
    }
    fn quant_filters(&mut self, f: &QuantFilters, shift: u32, mode: AccMode) {
        self.u8(f.scale_exp as i8 as u8);
        self.u8(shift as u8);
        self.u8(match mode {
            AccMode::Wide => 0,
            AccMode::Narrow16 => 1,
        });
        self.i8s(&f.data);
    }
    fn bin_act(&mut self, a: &BinActParams) {
        self.u32(a.channels() as u32);
        self.u8(a.scale_exp as i8 as u8);
        self.i8s(&a.thresholds);
        for d in &a.directions {
            self.u8(match d {
                Direction::AtLeast => 0,
                Direction::AtMost => 1,
            });
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(FormatError::Truncated.into());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn i8(&mut self) -> Result<i8> {
        Ok(self.u8()? as i8)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn i8s(&mut self, n: usize) -> Result<Vec<i8>> {
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        Ok(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn kernel(&mut self) -> Result<KernelShape> {
        let (f, c, h, w) = (self.dim()?, self.dim()?, self.dim()?, self.dim()?);
        KernelShape::new(f, c, h, w).map_err(|e| malformed(e.to_string()))
    }

    fn quant_filters(&mut self, k: KernelShape) -> Result<(QuantFilters, u32, AccMode)> {
        let scale_exp = self.i8()? as i32;
        let shift = self.u8()? as u32;
        let mode = match self.u8()? {
            0 => AccMode::Wide,
            1 => AccMode::Narrow16,
            other => return Err(malformed(format!("unknown accumulator mode {other}"))),
        };
        let data = self.i8s(k.len())?;
        let filters = QuantFilters::new(k, data, scale_exp).map_err(|e| malformed(e.to_string()))?;
        Ok((filters, shift, mode))
    }

    fn bin_act(&mut self) -> Result<BinActParams> {
        let channels = self.dim()?;
        let scale_exp = self.i8()? as i32;
        let thresholds = self.i8s(channels)?;
        let directions = self
            .take(channels)?
            .iter()
            .map(|&b| match b {
                0 => Ok(Direction::AtLeast),
                1 => Ok(Direction::AtMost),
                other => Err(malformed(format!("unknown threshold direction {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let act = BinActParams { thresholds, scale_exp, directions };
        act.validate().map_err(|e| malformed(e.to_string()))?;
        Ok(act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_tiny;

    #[test]
    fn roundtrip_is_byte_identical() {
        let m = build_tiny(5);
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = to_bytes(&build_tiny(5));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(FormatError::BadMagic))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(from_bytes(truncated), Err(Error::Format(FormatError::Checksum { .. }))));

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(FormatError::Checksum { .. }))));
    }

    #[test]
    fn shape_chain_break_with_valid_crc() {
        let m = build_tiny(5);
        let mut bytes = to_bytes(&m);
        // num_classes lives at offset 20
        bytes[20] = bytes[20].wrapping_add(1);
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(FormatError::ShapeChain { .. }))));
    }

    #[test]
    fn labels_roundtrip() {
        let m = build_tiny(5);
        let labels: Vec<String> = (0..m.num_classes()).map(|i| format!("class-{i}")).collect();
        let m = CoopModel::new(m.bnn().clone(), m.int8().clone(), Some(labels)).unwrap();
        let bytes = to_bytes(&m);
        assert_eq!(from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn weight_bytes_keep_pad_ones() {
        let shape = Shape::vector(11).unwrap();
        let bits: Vec<u8> = (0..11).map(|i| (i % 3 == 0) as u8).collect();
        let t = crate::tensor::pack_bits(&bits, shape, BitRole::Weight).unwrap();
        let raw = pack_weight_bytes(&t);
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[1] >> 3, 0b11111);
        assert_eq!(unpack_weight_bytes(&raw, shape).unwrap(), t);
        let mut broken = raw.clone();
        broken[1] &= 0x7F;
        assert!(unpack_weight_bytes(&broken, shape).is_err());
    }
}
