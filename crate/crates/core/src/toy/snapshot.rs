//! Snapshot container: `MAGIC`, a little-endian `u64` header length, a JSON
//! header (architecture, dataset spec, tensor table, content hash), then the
//! raw little-endian `f64` parameter data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use super::model::{ToyConfig, ToyDenoiser};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TOYDNSR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub config: ToyConfig,
    pub dataset: Option<DatasetSpec>,
    pub content_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_snapshot(model: &ToyDenoiser, dataset: Option<DatasetSpec>, path: impl AsRef<Path>) -> Result<SnapshotHeader> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.named_parameters() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = SnapshotHeader {
        format_version: 1,
        config: *model.config(),
        dataset,
        content_hash: model.content_hash(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.named_parameters() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(header)
}

/// Loads a frozen model and verifies its content hash.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<(ToyDenoiser, SnapshotHeader)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("snapshot: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: SnapshotHeader = serde_json::from_slice(body)?;
    if header.format_version != 1 {
        return Err(bad("unsupported format version"));
    }
    let data = &bytes[16 + hlen..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut named = Vec::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let slice = values.get(e.offset..e.offset + n).ok_or_else(|| bad("tensor out of range"))?;
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?));
    }
    let model = ToyDenoiser::from_parts(header.config, named)?;
    if model.content_hash() != header.content_hash {
        return Err(bad("content hash mismatch"));
    }
    Ok((model, header))
}
