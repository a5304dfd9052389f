// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight bundle persistence.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then raw
//! little-endian tensor data (`f32` for weights) in directory order.
//!
//! ```json
//! {"format_version": 1,
//!  "config": {...},
//!  "tensors": {"final_norm": {"dtype": "f32", "shape": [8], "offset": 0}, ...}}
//! ```
//!
//! Offsets are relative to the first byte after the header. The directory is
//! keyed by tensor name and serialised in sorted order, which is also the
//! order the data is written in.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    format_version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Serialises `header` followed by named tensors (in `BTreeMap` order).
pub(crate) fn encode_tensors<H: Serialize>(
    make_header: impl FnOnce(BTreeMap<String, TensorEntry>) -> H,
    tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    wide: bool,
) -> Result<Vec<u8>> {
    let width = if wide { 8 } else { 4 };
    let mut directory = BTreeMap::new();
    let mut offset = 0;
    for (name, (shape, data)) in tensors {
        directory.insert(
            name.clone(),
            TensorEntry {
                dtype: if wide { "f64" } else { "f32" }.into(),
                shape: shape.clone(),
                offset,
            },
        );
        offset += data.len() * width;
    }
    let header = serde_json::to_vec(&make_header(directory))?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in tensors.values() {
        for v in data {
            if wide {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Splits a file into its JSON header value and the data section.
pub(crate) fn split_header(bytes: &[u8]) -> Result<(serde_json::Value, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the length prefix",
            bytes.len()
        )));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::MalformedHeader(format!(
                "declared header length {len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    Ok((value, &bytes[end..]))
}

/// Reads one tensor described by `entry` out of the data section.
pub(crate) fn decode_tensor(
    name: &str,
    entry: &TensorEntry,
    expected_shape: &[usize],
    data: &[u8],
) -> Result<Vec<f64>> {
    let width = match entry.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` has unsupported dtype {other}"
            )))
        }
    };
    if entry.shape != expected_shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: expected_shape.to_vec(),
            found: entry.shape.clone(),
        });
    }
    let n: usize = expected_shape.iter().product();
    let start = entry.offset;
    let end = start + n * width;
    if end > data.len() {
        return Err(Error::Truncated {
            name: name.to_string(),
            start,
            end,
            available: data.len(),
        });
    }
    let bytes = &data[start..end];
    Ok(if width == 4 {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    })
}

pub fn write_bundle(model: &Model) -> Result<Vec<u8>> {
    let tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = model
        .weights
        .tensors()
        .into_iter()
        .map(|t| (t.name, (t.shape, t.data.to_vec())))
        .collect();
    encode_tensors(
        |tensors| BundleHeader {
            format_version: BUNDLE_FORMAT_VERSION,
            config: model.config,
            tensors,
        },
        &tensors,
        false,
    )
}

pub fn read_bundle(bytes: &[u8]) -> Result<Model> {
    let (value, data) = split_header(bytes)?;
    let header: BundleHeader = serde_json::from_value(value)
        .map_err(|e| Error::MalformedHeader(format!("unexpected header layout: {e}")))?;
    if header.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut weights = Weights::zeros(&header.config);
    for t in weights.tensors_mut() {
        let entry = header.tensors.get(&t.name).ok_or_else(|| {
            Error::MalformedHeader(format!("tensor `{}` missing from directory", t.name))
        })?;
        let values = decode_tensor(&t.name, entry, &t.shape, data)?;
        t.data.copy_from_slice(&values);
    }
    Model::from_weights(header.config, weights)
}

pub fn save_bundle(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_bundle(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Model> {
    read_bundle(&fs::read(path)?)
}
