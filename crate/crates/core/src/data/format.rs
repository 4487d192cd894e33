//! On-disk subject files.
//!
//! Signal file: `b"EEG1"`, then `u32` sample count, channels and timesteps
//! (little-endian), then `count * C * T` little-endian `f32` values laid out
//! `[sample][channel][time]`. Labels file: one unsigned byte per sample.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EEG1";
pub const HEADER_LEN: usize = 16;

fn ingest(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        file: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes a signal file, checking it against the expected shape.
pub fn decode_signals(
    path: &Path,
    bytes: &[u8],
    count: usize,
    channels: usize,
    timesteps: usize,
) -> Result<Vec<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(ingest(path, bytes.len(), "file shorter than the 16-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(ingest(path, 0, "bad magic, expected EEG1"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    for (i, (name, want)) in [("sample count", count), ("channels", channels), ("timesteps", timesteps)]
        .into_iter()
        .enumerate()
    {
        let got = field(i + 1);
        if got != want {
            return Err(ingest(
                path,
                4 * (i + 1),
                format!("header {name} is {got}, manifest says {want}"),
            ));
        }
    }
    let values = count * channels * timesteps;
    let expected = HEADER_LEN + 4 * values;
    if bytes.len() != expected {
        let at = bytes.len().min(expected);
        return Err(ingest(
            path,
            at,
            format!("file is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(values);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(ingest(path, HEADER_LEN + 4 * i, "non-finite sample value"));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn decode_labels(path: &Path, bytes: &[u8], count: usize) -> Result<Vec<usize>> {
    if bytes.len() != count {
        return Err(ingest(
            path,
            bytes.len().min(count),
            format!("{} label bytes, expected {count}", bytes.len()),
        ));
    }
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 | 1 => Ok(b as usize),
            other => Err(ingest(path, i, format!("label {other} is not 0 or 1"))),
        })
        .collect()
}

pub fn encode_signals(count: usize, channels: usize, timesteps: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), count * channels * timesteps);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(MAGIC);
    for v in [count, channels, timesteps] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
