//! Versioned parameter container.
//!
//! Layout: magic `GDCK`, a little-endian `u32` version, a `u64` header length,
//! a JSON header (kind, config, tensor index), then raw little-endian tensor
//! data in index order. Names are sorted, so saving the same store twice
//! produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"GDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Free-form label such as `"dit"` or `"tvae"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn dtype_tag(d: DType) -> Option<&'static str> {
    match d {
        DType::F32 => Some("f32"),
        DType::F64 => Some("f64"),
        _ => None,
    }
}

impl Checkpoint {
    /// Snapshot the store entries selected by `keep`.
    pub fn from_store(
        kind: &str,
        config: &impl Serialize,
        store: &ParamStore,
        keep: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let tensors = store.tensors()?.into_iter().filter(|(k, _)| keep(k)).collect();
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            tensors,
        })
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::with_capacity(self.tensors.len());
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            let tag = dtype_tag(t.dtype())
                .ok_or_else(|| crate::error::invalid(format!("{name}: unsupported dtype {:?}", t.dtype())))?;
            let flat = t.flatten_all()?;
            let start = data.len() as u64;
            match t.dtype() {
                DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
            index.push(TensorEntry {
                name: name.clone(),
                dtype: tag.to_string(),
                shape: t.dims().to_vec(),
                offset: start,
                len: data.len() as u64 - start,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| err(path, e.to_string()))?;
        let data = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = data
                .get(e.offset as usize..(e.offset + e.len) as usize)
                .ok_or_else(|| err(path, format!("{}: data out of range", e.name)))?;
            let t = match e.dtype.as_str() {
                "f32" => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)
                }
                "f64" => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)
                }
                other => return Err(err(path, format!("{}: unknown dtype {other}", e.name))),
            }
            .map_err(|x| err(path, format!("{}: {x}", e.name)))?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }

    /// Load into `store`; fails when the kind differs or a name is unknown.
    pub fn restore(&self, kind: &str, store: &ParamStore, require_all: bool) -> Result<()> {
        if self.kind != kind {
            return Err(crate::error::invalid(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                self.kind
            )));
        }
        store.load(&self.tensors, require_all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{Dit, ModelConfig};

    #[test]
    fn round_trip_is_bitwise_and_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = ParamStore::new(3, DType::F32);
        Dit::new(&a.root(), &cfg).unwrap();
        let ck = Checkpoint::from_store("dit", &cfg, &a, |_| true).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes, ck.to_bytes().unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_as::<ModelConfig>().unwrap(), cfg);

        let b = ParamStore::new(4, DType::F32);
        Dit::new(&b.root(), &cfg).unwrap();
        assert_ne!(a.checksum(|_| true).unwrap(), b.checksum(|_| true).unwrap());
        back.restore("dit", &b, true).unwrap();
        assert_eq!(a.checksum(|_| true).unwrap(), b.checksum(|_| true).unwrap());
        assert!(back.restore("tvae", &b, true).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(b"nope", p), Err(Error::Checkpoint { .. })));
        let ck = Checkpoint {
            kind: "k".into(),
            config: serde_json::Value::Null,
            tensors: BTreeMap::from([("w".to_string(), Tensor::ones(4, DType::F64, &Device::Cpu).unwrap())]),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(Checkpoint::from_bytes(&v2, p).is_err());
    }
}
