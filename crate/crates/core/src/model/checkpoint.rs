//! Binary checkpoint format.
//!
//! ```text
//! "EXMS" | version: u32 LE | manifest length: u64 LE | manifest (UTF-8 JSON)
//!        | parameter data: f64 LE, concatenated
//! ```
//!
//! The manifest holds the model configuration and, per parameter, its name,
//! shape and byte offset into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ParamStore};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"EXMS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>, ModelError> {
    let mut offset = 0u64;
    let params = model
        .params()
        .iter()
        .map(|(name, t)| {
            let entry = ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            entry
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        config: model.config().clone(),
        params,
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], ModelError> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated: need {n} bytes at offset {at}"))
        })?;
    let slice = &bytes[*at..end];
    *at = end;
    Ok(slice)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut at, len)?)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let data = &bytes[at..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected {
            return Err(ModelError::Checkpoint(format!(
                "parameter {} at unexpected offset",
                entry.name
            )));
        }
        let mut cursor = entry.offset as usize;
        let raw = take(data, &mut cursor, 8 * n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(entry.name, Tensor::new(entry.shape, values)?);
        expected += 8 * n as u64;
    }
    if expected as usize != data.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            data.len() - expected as usize
        )));
    }
    Model::new(manifest.config, store)
}

pub fn save(model: &Model, path: &Path) -> Result<(), ModelError> {
    fs::write(path, to_bytes(model)?)
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Model, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
