//! Flat named-array files.
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"LDCKPT01"
//! 8       8     header length H, u64 little-endian
//! 16      H     UTF-8 JSON header
//! 16+H    ...   payload: f64 little-endian values, arrays back to back
//! ```
//!
//! The header is `{"version": 1, "meta": <any JSON>, "arrays": [{"name",
//! "group", "shape", "offset"}, ...]}` where `offset` is the byte offset of
//! the array within the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LDCKPT01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint { meta, arrays: vec![] }
    }

    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) {
        self.arrays.push(NamedArray {
            name: name.into(),
            group: group.into(),
            value,
        });
    }

    /// Adds every parameter of `store`, prefixing names with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), p.group.clone(), p.value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|a| a.name == name).map(|a| &a.value)
    }

    /// Overwrites the values of `store` with the arrays named
    /// `prefix + param name`. Shapes must match.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.get(id).name);
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint has no array {name}")))?;
            if src.shape() != store.value(id).shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name}: stored {:?}, expected {:?}", src.shape(), store.value(id).shape()),
                ));
            }
            *store.value_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            entries.push(ArrayEntry {
                name: a.name.clone(),
                group: a.group.clone(),
                shape: a.value.shape().to_vec(),
                offset,
            });
            offset += 8 * a.value.len() as u64;
        }
        let header = Header {
            version: VERSION,
            meta: self.meta.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in a.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(path, d.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[body..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(8 * n)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad(&format!("array {} runs past end of file", e.name)))?;
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(e.shape, data).map_err(|err| bad(&format!("array {}: {err}", e.name)))?;
            arrays.push(NamedArray {
                name: e.name,
                group: e.group,
                value,
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
