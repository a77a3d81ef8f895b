//! `MSDK1` checkpoint container: magic line, little-endian manifest length,
//! JSON manifest, then raw little-endian `f64` payloads in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MSDK1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: ParamKind,
    /// Byte offset from the start of the payload section.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    fused: bool,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// A model plus free-form metadata (epoch, validation scores, ...).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn write_checkpoint(model: &Model, meta: &BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut payload = Vec::new();
    for (name, p) in model.store.iter() {
        let offset = payload.len() as u64;
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            kind: p.kind,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: "MSDK1".into(),
        config: model.config.clone(),
        fused: model.is_fused(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Format(m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not an MSDK1 checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let start = MAGIC.len() + 8;
    let end = usize::try_from(u64::from_le_bytes(len))
        .ok()
        .and_then(|n| start.checked_add(n))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest length exceeds file".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format != "MSDK1" {
        return Err(bad(format!("unsupported format {}", manifest.format)));
    }
    let payload = &bytes[end..];
    let mut model = Model::build(&manifest.config, 0)?;
    if manifest.fused {
        model = model.fuse()?;
    }
    if manifest.tensors.len() != model.store.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, architecture needs {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut expect = 0u64;
    for e in &manifest.tensors {
        let want = model
            .store
            .get(&e.name)
            .map_err(|_| bad(format!("unexpected tensor {}", e.name)))?;
        if want.value.shape() != e.shape.as_slice() || e.dtype != "f64" {
            return Err(bad(format!("tensor {}: {} {:?} does not fit {:?}", e.name, e.dtype, e.shape, want.value.shape())));
        }
        let n: usize = e.shape.iter().product();
        if e.offset != expect || e.nbytes != 8 * n as u64 {
            return Err(bad(format!("tensor {}: inconsistent offset or size", e.name)));
        }
        let lo = e.offset as usize;
        let raw = payload
            .get(lo..lo + 8 * n)
            .ok_or_else(|| bad(format!("tensor {} runs past end of file", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(&e.shape, data)?, e.kind);
        expect += e.nbytes;
    }
    if expect != payload.len() as u64 {
        return Err(bad(format!("{} trailing bytes after payloads", payload.len() as u64 - expect)));
    }
    model.store = store;
    Ok(Checkpoint {
        model,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    let bytes = write_checkpoint(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
