//! Model checkpoints.
//!
//! Layout: `b"DSNM"`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor listed in the header as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"DSNM";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    domains: Vec<String>,
    batches_seen: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

fn tensors(model: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for (i, p) in model.params().into_iter().enumerate() {
        out.push((format!("param.{i}"), p.value.shape().to_vec(), p.value.data()));
    }
    for (l, layer) in model.norm_layers().into_iter().enumerate() {
        for (s, state) in layer.states().into_iter().enumerate() {
            let c = state.channels();
            out.push((format!("norm.{l}.{s}.running_mean"), vec![c], &state.running_mean[..]));
            out.push((format!("norm.{l}.{s}.running_var"), vec![c], &state.running_var[..]));
        }
    }
    out
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let entries = tensors(model);
    let header = Header {
        model: model.config.clone(),
        domains: model.domains().to_vec(),
        batches_seen: model
            .norm_layers()
            .iter()
            .flat_map(|l| l.states().into_iter().map(|s| s.batches_seen))
            .collect(),
        tensors: entries
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, data) in &entries {
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", what.into()))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?;
    let mut model = build_model(&header.model, &header.domains, 0)?;

    let expected = tensors(&model);
    if expected.len() != header.tensors.len() {
        return Err(corrupt("tensor list does not match the model layout"));
    }
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(corrupt(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
    }
    let total: usize = expected.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    let raw = &bytes[16 + hlen..];
    if raw.len() != 8 * total {
        return Err(corrupt(format!("{} data bytes, expected {}", raw.len(), 8 * total)));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = values.next().unwrap());

    for p in model.params_mut() {
        take(p.value.data_mut());
    }
    let mut seen = header.batches_seen.iter();
    for layer in model.norm_layers_mut() {
        for state in layer.states_mut() {
            take(&mut state.running_mean);
            take(&mut state.running_var);
            state.batches_seen = *seen.next().ok_or_else(|| corrupt("missing batch counts"))?;
        }
    }
    Ok(model)
}
