//! EFMT tensor container.
//!
//! ```text
//! 0..8      magic "EFMT0001"
//! 8..16     u64 LE header length H
//! 16..16+H  UTF-8 JSON header {"arch": {...}, "tensors": {name: {dtype, shape, offset, nbytes}}}
//! P..       payload, P = first multiple of 64 at or after 16+H
//! ```
//!
//! Tensor offsets are relative to P. The writer also stores
//! `payload_sha256`, which the reader verifies when present.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchMeta, ModelArtifact, Tensor};
use crate::error::{Error, Result};

pub const EFMT_MAGIC: &[u8; 8] = b"EFMT0001";
pub const PAYLOAD_ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchMeta,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload_sha256: Option<String>,
}

fn align_up(n: usize, to: usize) -> usize {
    n.div_ceil(to) * to
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(artifact: &ModelArtifact) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = BTreeMap::new();
    for t in artifact.tensors() {
        let offset = payload.len() as u64;
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.insert(
            t.name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                nbytes: payload.len() as u64 - offset,
            },
        );
    }
    let header = Header {
        arch: artifact.arch.clone(),
        tensors: entries,
        payload_sha256: Some(sha256_hex(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let start = align_up(16 + json.len(), PAYLOAD_ALIGN);
    let mut out = Vec::with_capacity(start + payload.len());
    out.extend_from_slice(EFMT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(start, 0);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ModelArtifact> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != EFMT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let start = align_up(header_end, PAYLOAD_ALIGN);
    if start > bytes.len() {
        return Err(Error::Format("payload missing".into()));
    }
    let payload = &bytes[start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, e) in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel as u64 * 4 {
            return Err(Error::Shape(format!(
                "tensor {name}: nbytes {} does not match shape {:?}",
                e.nbytes, e.shape
            )));
        }
        let lo = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
        let hi = lo
            .checked_add(numel * 4)
            .filter(|&hi| hi <= payload.len())
            .ok_or_else(|| Error::Format(format!("tensor {name} extends past end of file")))?;
        let data = payload[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor {
            name,
            shape: e.shape,
            data,
        });
    }
    if let Some(expected) = &header.payload_sha256 {
        let actual = sha256_hex(payload);
        if &actual != expected {
            return Err(Error::Checksum(format!("payload sha256 {actual} != header {expected}")));
        }
    }
    ModelArtifact::from_tensors(header.arch, tensors)
}

pub fn read_artifact(path: impl AsRef<Path>) -> Result<ModelArtifact> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_artifact(artifact: &ModelArtifact, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(artifact)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
