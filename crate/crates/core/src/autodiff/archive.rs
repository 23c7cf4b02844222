//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `QSRTENS1`, a little-endian `u64` manifest length,
//! the JSON manifest, then the raw little-endian tensor payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"QSRTENS1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Free-form JSON (model config, training state, ...).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serialises named tensors and metadata into archive bytes.
pub fn encode<T: Scalar>(store: &ParamStore<T>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(store.numel() * T::BYTES);
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = payload.len() as u64;
        t.data().iter().for_each(|v| v.write_le(&mut payload));
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: ARCHIVE_VERSION,
        metadata,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses archive bytes produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bad = |m: String| Error::Format(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing archive magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != ARCHIVE_VERSION {
        return Err(bad(format!("unsupported archive version {}", manifest.version)));
    }
    let payload = &bytes[16 + mlen..];
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(bad(format!("tensor {} has dtype {}, expected {}", e.name, e.dtype, T::DTYPE)));
        }
        let n: usize = e.shape.iter().product();
        if e.nbytes as usize != n * T::BYTES {
            return Err(bad(format!("tensor {} size disagrees with shape {:?}", e.name, e.shape)));
        }
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + e.nbytes as usize)
            .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok((store, manifest.metadata))
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, metadata: serde_json::Value) -> Result<()> {
    let bytes = encode(store, metadata)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap()).unwrap();
        store.insert("b", Tensor::scalar(7.0)).unwrap();
        let meta = serde_json::json!({"step": 12});
        let (back, m) = decode::<f32>(&encode(&store, meta.clone()).unwrap()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.names(), store.names());
        for (a, b) in back.tensors().iter().zip(store.tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn rejects_wrong_dtype_and_garbage() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        let bytes = encode(&store, serde_json::Value::Null).unwrap();
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
        assert!(decode::<f64>(b"not an archive").is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
