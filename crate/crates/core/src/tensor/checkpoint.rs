//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"NNASCKPT"
//! length     u32       byte length of the JSON manifest
//! manifest   JSON      {"version":1,"meta":...,"tensors":[{"name","shape","dtype":"f32","offset","len"}]}
//! data       f32 LE    tensors concatenated in manifest order; offset/len count elements
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::artifact::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NNASCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

/// Parameters plus free-form metadata (usually the architecture).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore<f32>, meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                len: t.len(),
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        meta: meta.clone(),
        tensors,
    })?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::Format("manifest too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in params.iter() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    if manifest.version != VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.version,
            expected: VERSION,
        });
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::Format("truncated tensor data".into()));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = ParamStore::new();
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype `{}`", e.dtype)));
        }
        let end = e.offset.checked_add(e.len).filter(|&end| end <= floats.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("tensor `{}` exceeds data section", e.name)));
        };
        let t = Tensor::new(e.shape, floats[e.offset..end].to_vec())
            .map_err(|err| Error::Format(format!("tensor `{}`: {err}", e.name)))?;
        params.add(e.name, t)?;
    }
    Ok(Checkpoint {
        params,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, meta: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, meta)?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ParamStore::new();
        p.add("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-12]).unwrap())
            .unwrap();
        p.add("b", Tensor::scalar(7.25)).unwrap();
        let meta = serde_json::json!({"arch": "x"});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &meta).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.meta, meta);
        for ((na, ta), (nb, tb)) in p.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&b"NOPENOPE\0\0\0\0"[..]).unwrap_err();
        assert!(err.is_validation());
    }
}
