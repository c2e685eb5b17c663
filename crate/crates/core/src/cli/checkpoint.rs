//! Checkpoint container: magic, version, manifest length, JSON manifest,
//! manifest SHA-256, binary blob (checksummed inside the manifest).
//!
//! Any serialized object of the exact form `{rows, cols, data}` (a matrix) is
//! moved out of the manifest into the blob as little-endian reals, row-major,
//! and replaced by `{"tensor": index}`. Training state is stored at 64 bits;
//! exported policies may use 32.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LORASACK";
pub const FORMAT_VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// JSON pointer of the tensor inside the payload.
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// What the payload holds, e.g. `train_state`, `adapters`, `policy`.
    pub kind: String,
    pub config_hash: String,
    pub lineage: String,
    pub dtype: Dtype,
    pub tensors: Vec<TensorEntry>,
    pub blob_len: usize,
    pub blob_sha256: String,
    /// Small metadata not part of the payload (step, evaluation, agent).
    pub meta: Value,
    pub payload: Value,
}

/// Header fields the caller supplies.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub kind: String,
    pub config_hash: String,
    pub lineage: String,
    pub dtype: Dtype,
    pub meta: Value,
}

fn is_matrix(map: &Map<String, Value>) -> bool {
    map.len() == 3
        && map.get("rows").is_some_and(Value::is_u64)
        && map.get("cols").is_some_and(Value::is_u64)
        && map.get("data").is_some_and(Value::is_array)
}

fn extract(v: &mut Value, path: &mut String, dtype: Dtype, tensors: &mut Vec<TensorEntry>, blob: &mut Vec<u8>) -> Result<()> {
    match v {
        Value::Object(map) if is_matrix(map) => {
            let rows = map["rows"].as_u64().unwrap_or(0) as usize;
            let cols = map["cols"].as_u64().unwrap_or(0) as usize;
            let data = map["data"].as_array().map(Vec::as_slice).unwrap_or(&[]);
            if data.len() != rows * cols {
                return Err(Error::Integrity(format!("tensor {path} has {} values for {rows}x{cols}", data.len())));
            }
            let offset = blob.len();
            for x in data {
                let f = x.as_f64().ok_or_else(|| Error::NonFinite(path.clone()))?;
                match dtype {
                    Dtype::F64 => blob.extend_from_slice(&f.to_le_bytes()),
                    Dtype::F32 => blob.extend_from_slice(&(f as f32).to_le_bytes()),
                }
            }
            tensors.push(TensorEntry { name: path.clone(), rows, cols, offset });
            let mut r = Map::new();
            r.insert("tensor".into(), Value::from(tensors.len() - 1));
            *v = Value::Object(r);
        }
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                let len = path.len();
                path.push('/');
                path.push_str(k);
                extract(child, path, dtype, tensors, blob)?;
                path.truncate(len);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter_mut().enumerate() {
                let len = path.len();
                path.push('/');
                path.push_str(&i.to_string());
                extract(child, path, dtype, tensors, blob)?;
                path.truncate(len);
            }
        }
        _ => {}
    }
    Ok(())
}

fn restore(v: &mut Value, m: &Manifest, blob: &[u8]) -> Result<()> {
    match v {
        Value::Object(map) if map.len() == 1 && map.contains_key("tensor") => {
            let idx = map["tensor"].as_u64().ok_or_else(|| Error::Integrity("bad tensor reference".into()))? as usize;
            let t = m.tensors.get(idx).ok_or_else(|| Error::Integrity(format!("tensor {idx} missing")))?;
            let w = m.dtype.width();
            let end = t.offset + t.rows * t.cols * w;
            let bytes = blob.get(t.offset..end).ok_or_else(|| Error::Integrity(format!("tensor {} out of blob", t.name)))?;
            let data: Vec<Value> = bytes
                .chunks_exact(w)
                .map(|c| match m.dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .map(|x| serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| Error::NonFinite(t.name.clone())))
                .collect::<Result<_>>()?;
            let mut r = Map::new();
            r.insert("rows".into(), Value::from(t.rows));
            r.insert("cols".into(), Value::from(t.cols));
            r.insert("data".into(), Value::Array(data));
            *v = Value::Object(r);
        }
        Value::Object(map) => {
            for child in map.values_mut() {
                restore(child, m, blob)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                restore(child, m, blob)?;
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes `payload` into container bytes.
pub fn encode<T: Serialize>(payload: &T, header: &Header) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(payload)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    extract(&mut value, &mut String::new(), header.dtype, &mut tensors, &mut blob)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: header.kind.clone(),
        config_hash: header.config_hash.clone(),
        lineage: header.lineage.clone(),
        dtype: header.dtype,
        tensors,
        blob_len: blob.len(),
        blob_sha256: sha256_hex(&blob),
        meta: header.meta.clone(),
        payload: value,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + 32 + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses and verifies the container; returns the manifest (payload still
/// holding tensor references) and the blob.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let head = MAGIC.len() + 12;
    if bytes.len() < head || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = head.checked_add(len).and_then(|e| e.checked_add(32));
    let (json, digest) = match end.and_then(|e| bytes.get(head..e)) {
        Some(b) => b.split_at(len),
        None => return Err(Error::Integrity("truncated manifest".into())),
    };
    if Sha256::digest(json).as_slice() != digest {
        return Err(Error::Integrity("manifest checksum mismatch".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
    let blob = &bytes[head + len + 32..];
    if blob.len() != manifest.blob_len {
        return Err(Error::Integrity(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_len)));
    }
    if sha256_hex(blob) != manifest.blob_sha256 {
        return Err(Error::Integrity("blob checksum mismatch".into()));
    }
    Ok((manifest, blob))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<(Manifest, T)> {
    let (mut manifest, blob) = decode_manifest(bytes)?;
    let mut payload = std::mem::take(&mut manifest.payload);
    restore(&mut payload, &manifest, blob)?;
    let value = serde_json::from_value(payload).map_err(|e| Error::Integrity(format!("payload does not match: {e}")))?;
    Ok((manifest, value))
}

/// Writes atomically via a sibling temporary file.
pub fn write<T: Serialize>(path: &Path, payload: &T, header: &Header) -> Result<()> {
    let bytes = encode(payload, header)?;
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<(Manifest, T)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut m, _) = decode_manifest(&bytes)?;
    m.payload = Value::Null;
    Ok(m)
}
