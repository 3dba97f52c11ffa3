//! IDX tensor files (the MNIST container) restricted to unsigned bytes.
//!
//! Header: two zero bytes, type code `0x08`, dimension count, then one
//! big-endian u32 per dimension, then the payload in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Shape;

const TYPE_U8: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset("bad IDX magic".into()));
    }
    if bytes[2] != TYPE_U8 {
        return Err(Error::Dataset(format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::Dataset("IDX file has no dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Dataset("IDX header truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Dataset("IDX element count overflows".into()))?;
    if bytes.len() - header != count {
        return Err(Error::Dataset(format!(
            "IDX payload holds {} bytes, dimensions need {count}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > u8::MAX as usize {
        return Err(Error::Dataset("IDX needs 1..=255 dimensions".into()));
    }
    if dims.iter().product::<usize>() != data.len() || dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Dataset("IDX dimensions do not match payload".into()));
    }
    let mut out = vec![0, 0, TYPE_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// A batch of u8 images sharing one CHW shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    shape: Shape,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: Shape, pixels: Vec<u8>) -> Result<Self> {
        if pixels.is_empty() || pixels.len() % shape.len() != 0 {
            return Err(Error::Dataset(format!(
                "{} pixels is not a whole number of {shape} images",
                pixels.len()
            )));
        }
        Ok(Dataset { shape, pixels })
    }

    /// Accepts `(n, h, w)` single-channel or `(n, c, h, w)` image arrays.
    pub fn from_idx(arr: IdxArray) -> Result<Self> {
        let shape = match arr.dims[..] {
            [_, h, w] => Shape::new(1, h, w),
            [_, c, h, w] => Shape::new(c, h, w),
            _ => return Err(Error::Dataset("image IDX must have 3 or 4 dimensions".into())),
        }
        .map_err(|e| Error::Dataset(e.to_string()))?;
        Dataset::new(shape, arr.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_idx(parse_idx(&std::fs::read(path)?)?)
    }

    pub fn to_idx(&self) -> Vec<u8> {
        let s = self.shape;
        let dims: Vec<usize> = if s.channels == 1 {
            vec![self.len(), s.height, s.width]
        } else {
            vec![self.len(), s.channels, s.height, s.width]
        };
        encode_idx(&dims, &self.pixels).expect("dataset dims are consistent")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[u8] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    labels_from_idx(parse_idx(&std::fs::read(path)?)?)
}

pub fn labels_from_idx(arr: IdxArray) -> Result<Vec<u8>> {
    if arr.dims.len() != 1 {
        return Err(Error::Dataset("label IDX must have exactly one dimension".into()));
    }
    Ok(arr.data)
}

pub fn labels_to_idx(labels: &[u8]) -> Vec<u8> {
    encode_idx(&[labels.len()], labels).expect("one dimension")
}
