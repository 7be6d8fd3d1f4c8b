//! Checkpoint container: a single binary archive of named parameter arrays
//! plus an embedded JSON metadata block (network config, role, versioning).
//!
//! Layout:
//! ```text
//! magic   8 bytes  "HADNCKPT"
//! version u32 LE   container format version (currently 1)
//! metalen u64 LE
//! meta    JSON     {"dtype", "meta", "tensors": [{"name", "shape"}, ...]}
//! payload          tensor data in listing order, little-endian scalars
//! ```
//! Tensor names follow the canonical parameter scheme documented in
//! [`crate::nets`] (`encoder.<n>.conv<i>.weight`, ...). Writing is
//! deterministic: tensors are stored in sorted name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HADNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// In-memory archive of named tensors with a JSON meta payload.
#[derive(Debug, Clone)]
pub struct TensorArchive<T> {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for TensorArchive<T> {
    fn default() -> Self {
        TensorArchive {
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> TensorArchive<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let meta = ArchiveMeta {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let meta_bytes = serde_json::to_vec(&meta)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes_vec())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint archive",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version} newer than supported {FORMAT_VERSION}",
                path.display()
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let meta_len = u64::from_le_bytes(buf8) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta: ArchiveMeta = serde_json::from_slice(&meta_bytes)?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: stores {} tensors, requested {}",
                path.display(),
                meta.dtype,
                T::DTYPE
            )));
        }
        let mut tensors = BTreeMap::new();
        let width = T::BYTE_WIDTH;
        for entry in meta.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * width];
            r.read_exact(&mut bytes).map_err(|e| {
                Error::Checkpoint(format!("{}: tensor {}: {e}", path.display(), entry.name))
            })?;
            let data: Vec<T> = bytes.chunks_exact(width).map(T::from_le_slice).collect();
            tensors.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
        }
        Ok(TensorArchive {
            meta: meta.meta,
            tensors,
        })
    }
}

/// FNV-1a 64-bit digest; used to fingerprint checkpoints and verify the
/// frozen-teacher contract.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Digest of a file's raw bytes.
pub fn file_digest(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&std::fs::read(path)?))
}
