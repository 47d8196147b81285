//! Single-file parameter container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind, dtype, config, step, extra metadata, tensor table), then
//! the raw little-endian tensor blobs in table order.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use landmark_tensor::{ParamStore, Scalar, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LMRKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    dtype: String,
    config: Value,
    step: u64,
    extra: Map<String, Value>,
    tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub config: Value,
    pub step: u64,
    pub extra: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(kind: &str, config: &impl Serialize, step: u64) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(Self { kind: kind.into(), config, step, extra: Map::new(), tensors: Vec::new() })
    }

    /// Append every entry of `store`, names prefixed.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for e in store.entries() {
            self.tensors.push((format!("{prefix}{}", e.name), e.value.clone()));
        }
    }

    /// Overwrite `store` from the prefixed tensors; the first name or shape
    /// mismatch is an error naming that tensor.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<T>, path: &Path) -> Result<()> {
        let index: HashMap<&str, &Tensor<T>> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n, t)))
            .collect();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.entry(id).name.clone();
            let src = index
                .get(name.as_str())
                .ok_or_else(|| ckpt_err(path, format!("tensor {prefix}{name} missing from checkpoint")))?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(ckpt_err(
                    path,
                    format!("tensor {prefix}{name} has shape {:?} in checkpoint but {:?} in model", src.shape(), dst.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        if index.len() != store.len() {
            let extra = index.keys().find(|n| store.find(n).is_none()).unwrap_or(&"?");
            return Err(ckpt_err(path, format!("checkpoint tensor {prefix}{extra} has no counterpart in model")));
        }
        Ok(())
    }

    pub fn config_as<C: DeserializeOwned>(&self, path: &Path) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| ckpt_err(path, format!("config: {e}")))
    }

    /// Write the container; returns its sha256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            dtype: T::DTYPE.into(),
            config: self.config.clone(),
            step: self.step,
            extra: self.extra.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorRecord { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(path, e.to_string()))?;
        let total: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut buf = Vec::with_capacity(20 + json.len() + total * T::BYTES);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut buf);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(ckpt_err(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ckpt_err(path, format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let body = buf.get(20..20 + hlen).ok_or_else(|| ckpt_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ckpt_err(path, format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(ckpt_err(path, format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
        }
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for rec in header.tensors {
            let n: usize = rec.shape.iter().product();
            let end = pos + n * T::BYTES;
            let bytes = buf.get(pos..end).ok_or_else(|| ckpt_err(path, format!("tensor {} truncated", rec.name)))?;
            let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((rec.name, Tensor::from_vec(&rec.shape, data)?));
            pos = end;
        }
        if pos != buf.len() {
            return Err(ckpt_err(path, format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(Self { kind: header.kind, config: header.config, step: header.step, extra: header.extra, tensors })
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(ckpt_err(path, format!("holds a {} model, expected {kind}", self.kind)));
        }
        Ok(())
    }
}

/// Digest of parameter names and values, for identifying in-memory weights.
pub fn store_digest<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for e in store.entries() {
        h.update(e.name.as_bytes());
        for v in e.value.data() {
            h.update(v.bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
