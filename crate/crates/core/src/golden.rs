//! Golden per-layer reference vectors and their cross-check.
//!
//! Container (little-endian): magic `CPGV`, version u16, record count u32,
//! then records. A record is `name_len u8, name, domain u8 (0 = int8,
//! 1 = bits), scale_exp i8, c u32, h u32, w u32, payload_len u32, payload`.
//! int8 payloads hold one byte per element; bit payloads hold the packed
//! u32 words. A record named `input` starts a new sample; the records after
//! it are that sample's layer outputs, in any order and any subset.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, CoopModel};
use crate::tensor::{BitRole, BitTensor, QuantTensor, Shape};

pub const GOLDEN_MAGIC: &[u8; 4] = b"CPGV";
pub const GOLDEN_VERSION: u16 = 1;
pub const INPUT_RECORD: &str = "input";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenRecord {
    pub name: String,
    pub value: Activation,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Dataset(format!("golden file: {}", msg.into()))
}

pub fn encode_golden(records: &[GoldenRecord]) -> Vec<u8> {
    let mut out = GOLDEN_MAGIC.to_vec();
    out.extend_from_slice(&GOLDEN_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.push(r.name.len() as u8);
        out.extend_from_slice(r.name.as_bytes());
        let (domain, exp, shape, payload) = match &r.value {
            Activation::Quant(q) => {
                (0u8, q.scale_exp(), q.shape(), q.data().iter().map(|&v| v as u8).collect())
            }
            Activation::Bits(b) => {
                (1u8, 0, b.shape(), b.words().iter().flat_map(|w| w.to_le_bytes()).collect::<Vec<u8>>())
            }
        };
        out.push(domain);
        out.push(exp as i8 as u8);
        for d in [shape.channels, shape.height, shape.width, payload.len()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&payload);
    }
    out
}

pub fn parse_golden(bytes: &[u8]) -> Result<Vec<GoldenRecord>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != GOLDEN_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
    if version != GOLDEN_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = take(1)?[0] as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        let head = take(2)?;
        let (domain, exp) = (head[0], head[1] as i8 as i32);
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2]).map_err(|e| bad(e.to_string()))?;
        let payload = take(dims[3])?;
        let value = match domain {
            0 => {
                let data = payload.iter().map(|&b| b as i8).collect();
                Activation::Quant(QuantTensor::new(shape, data, exp).map_err(|e| bad(e.to_string()))?)
            }
            1 => {
                if payload.len() % 4 != 0 {
                    return Err(bad(format!("bit payload of `{name}` is not whole words")));
                }
                let words = payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Activation::Bits(
                    BitTensor::from_words(shape, words, BitRole::Activation)
                        .map_err(|e| bad(e.to_string()))?,
                )
            }
            other => return Err(bad(format!("unknown domain {other}"))),
        };
        records.push(GoldenRecord { name, value });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(records)
}

pub fn load_golden(path: impl AsRef<Path>) -> Result<Vec<GoldenRecord>> {
    parse_golden(&std::fs::read(path)?)
}

/// Every layer output of both arms for one input, in execution order.
pub fn trace(m: &CoopModel, x: &QuantTensor) -> Result<Vec<GoldenRecord>> {
    let mut out = vec![GoldenRecord { name: INPUT_RECORD.into(), value: Activation::Quant(x.clone()) }];
    for arm in [m.bnn(), m.int8()] {
        arm.forward_trace(x, |spec, value| {
            out.push(GoldenRecord { name: spec.name.clone(), value: value.clone() })
        })?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct GoldenReport {
    pub samples: usize,
    pub records_checked: usize,
    /// Largest int8 difference seen, in LSBs.
    pub max_int8_diff: u32,
    /// int8 records with any element more than 1 LSB off.
    pub int8_failures: Vec<String>,
    /// Binary records that are not bit-identical.
    pub bit_failures: Vec<String>,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.int8_failures.is_empty() && self.bit_failures.is_empty()
    }
}

/// Recomputes every recorded layer output: int8 layers may differ by one
/// LSB, binary layers must match exactly.
pub fn verify_golden(m: &CoopModel, records: &[GoldenRecord]) -> Result<GoldenReport> {
    let mut report = GoldenReport::default();
    let mut i = 0;
    while i < records.len() {
        let rec = &records[i];
        let Activation::Quant(x) = &rec.value else {
            return Err(bad(format!("sample must start with an int8 `{INPUT_RECORD}` record")));
        };
        if rec.name != INPUT_RECORD {
            return Err(bad(format!("expected `{INPUT_RECORD}`, found `{}`", rec.name)));
        }
        let ours: HashMap<String, Activation> =
            trace(m, x)?.into_iter().skip(1).map(|r| (r.name, r.value)).collect();
        report.samples += 1;
        i += 1;
        while i < records.len() && records[i].name != INPUT_RECORD {
            let want = &records[i];
            let got = ours
                .get(&want.name)
                .ok_or_else(|| bad(format!("model has no layer `{}`", want.name)))?;
            let label = format!("sample {} {}", report.samples - 1, want.name);
            match (got, &want.value) {
                (Activation::Quant(a), Activation::Quant(b))
                    if a.shape() == b.shape() && a.scale_exp() == b.scale_exp() =>
                {
                    let diff = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&p, &q)| (p as i32 - q as i32).unsigned_abs())
                        .max()
                        .unwrap_or(0);
                    report.max_int8_diff = report.max_int8_diff.max(diff);
                    if diff > 1 {
                        report.int8_failures.push(label);
                    }
                }
                (Activation::Bits(a), Activation::Bits(b)) => {
                    if a != b {
                        report.bit_failures.push(label);
                    }
                }
                (Activation::Quant(_), _) => report.int8_failures.push(label),
                (Activation::Bits(_), _) => report.bit_failures.push(label),
            }
            report.records_checked += 1;
            i += 1;
        }
    }
    Ok(report)
}
