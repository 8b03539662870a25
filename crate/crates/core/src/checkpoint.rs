//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SPGNNCK1"
//! u64                 manifest length in bytes
//! [u8; len]           UTF-8 JSON manifest
//! per parameter:
//!   u64               element count n
//!   [f64; n]          values, row-major
//! ```
//!
//! The manifest is `{"version": 1, "meta": <any>, "params": [{"name",
//! "shape", "offset"}]}` where `offset` is the byte position of the
//! parameter's length prefix relative to the end of the manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamStore, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPGNNCK1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub meta: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub fn write_to(mut w: impl Write, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let params = store
        .iter()
        .map(|(_, p)| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += 8 + 8 * p.value.len() as u64;
            e
        })
        .collect();
    let manifest = Manifest {
        version: 1,
        meta: meta.clone(),
        params,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<(Manifest, Vec<Parameter>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    let data = &bytes[16 + mlen..];
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let off = e.offset as usize;
        let count = data
            .get(off..off + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated length", e.name)))?;
        let expected: usize = e.shape.iter().product();
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "{}: {count} values for shape {:?}",
                e.name, e.shape
            )));
        }
        let raw = data
            .get(off + 8..off + 8 + 8 * count)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated data", e.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(&e.shape, values)?;
        params.push(Parameter {
            name: e.name.clone(),
            grad: Tensor::zeros(&e.shape),
            value,
        });
    }
    Ok((manifest, params))
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let f = fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(f);
        write_to(&mut w, store, meta)?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Manifest, Vec<Parameter>)> {
    read_from(fs::File::open(path)?)
}

/// Overwrite the values of `store` from a checkpoint with identical
/// parameter names and shapes. Returns the stored metadata.
pub fn load_into(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<serde_json::Value> {
    let (manifest, params) = load(path)?;
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (dst, src) in store.iter_mut().zip(params) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                dst.name,
                dst.value.shape(),
                src.name,
                src.value.shape()
            )));
        }
        dst.value = src.value;
    }
    Ok(manifest.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, ParamBuilder};
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut b = ParamBuilder::new();
        b.scope("layer", |b| {
            b.add("w", &[3, 2], Init::KaimingUniform { fan_in: 3 });
            b.add("b", &[2], Init::Uniform { bound: 1e-300 });
        });
        let store = b.build(&mut Rng::seed(9));
        let meta = serde_json::json!({"note": "x"});
        let mut buf = Vec::new();
        write_to(&mut buf, &store, &meta).unwrap();
        let (m, params) = read_from(buf.as_slice()).unwrap();
        assert_eq!(m.meta, meta);
        assert_eq!(m.params[1].offset, 8 + 6 * 8);
        for ((_, a), b) in store.iter().zip(&params) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_from(&b"not a checkpoint"[..]).is_err());
    }
}
