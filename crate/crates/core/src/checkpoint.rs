//! Container for trained weights: `AMTL`, a u32 format version, a u64 header
//! length, a JSON header, then every tensor as little-endian f32 in the
//! declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamRef, Parameterized};

pub const MAGIC: &[u8; 4] = b"AMTL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    pub tensors: Vec<TensorSpec>,
}

pub fn encode(kind: &str, config: &impl Serialize, regime: Option<&str>, params: &[ParamRef<'_, f32>]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        regime: regime.map(str::to_string),
        tensors: params
            .iter()
            .map(|p| TensorSpec {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let count: usize = params.iter().map(|p| p.data.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing AMTL magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    let raw = &body[len..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if raw.len() != 4 * expected {
        return Err(bad(&format!("expected {expected} values, found {} bytes", raw.len())));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

/// Checks the header's tensor list against a freshly built model and loads
/// the values into it.
pub fn restore<M: Parameterized<f32>>(model: &mut M, header: &CheckpointHeader, values: &[f32]) -> Result<()> {
    let specs: Vec<TensorSpec> = model
        .params()
        .iter()
        .map(|p| TensorSpec {
            name: p.name.clone(),
            shape: p.shape.clone(),
        })
        .collect();
    if specs != header.tensors {
        return Err(Error::Checkpoint("tensor names or shapes do not match the config".into()));
    }
    model.load_flat(values);
    if !model.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(decode(b"XXXX").is_err());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }
}
