//! Binary integer-graph files.
//!
//! Layout: the magic `NNASQGRF`, a little-endian `u32` manifest length, the
//! JSON manifest, then one data section. The manifest lists every layer with
//! byte offsets into the data section: int8 weights, little-endian int32
//! biases and, at `eps_offset`, the little-endian float64 steps
//! (`input_eps`, `output_eps`, then `eps_in`, `eps_w`, `eps_out` per layer).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IntLayer, IntegerGraph, LayerScale, QOp, Requant};
use crate::artifact::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NNASQGRF";
pub const QGRAPH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    op: QOp,
    weight_offset: usize,
    weight_len: usize,
    bias_offset: usize,
    bias_len: usize,
    requant: Option<Requant>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    name: String,
    input: [usize; 3],
    layers: Vec<LayerEntry>,
    eps_offset: usize,
    data_len: usize,
}

pub fn write_integer_graph<W: Write>(mut w: W, g: &IntegerGraph) -> Result<()> {
    let mut data = Vec::new();
    let mut layers = Vec::with_capacity(g.layers.len());
    for l in &g.layers {
        let weight_offset = data.len();
        data.extend(l.weight.iter().map(|&v| v as u8));
        let bias_offset = data.len();
        for b in &l.bias {
            data.extend_from_slice(&b.to_le_bytes());
        }
        layers.push(LayerEntry {
            op: l.op,
            weight_offset,
            weight_len: l.weight.len(),
            bias_offset,
            bias_len: l.bias.len(),
            requant: l.requant,
        });
    }
    let eps_offset = data.len();
    let mut eps = vec![g.input_eps, g.output_eps];
    for s in &g.scales {
        eps.extend([s.eps_in, s.eps_w, s.eps_out]);
    }
    for e in eps {
        data.extend_from_slice(&e.to_le_bytes());
    }
    let m = Manifest {
        version: QGRAPH_VERSION,
        name: g.name.clone(),
        input: g.input,
        layers,
        eps_offset,
        data_len: data.len(),
    };
    let json = serde_json::to_vec(&m)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&data)?;
    Ok(())
}

fn f64_at(data: &[u8], off: usize) -> Result<f64> {
    let b = data
        .get(off..off + 8)
        .ok_or_else(|| Error::Format("step table truncated".into()))?;
    Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
}

pub fn read_integer_graph<R: Read>(mut r: R) -> Result<IntegerGraph> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an integer graph file".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let m: Manifest = serde_json::from_slice(&json)?;
    if m.version != QGRAPH_VERSION {
        return Err(Error::SchemaVersion {
            found: m.version,
            expected: QGRAPH_VERSION,
        });
    }
    let mut data = vec![0u8; m.data_len];
    r.read_exact(&mut data)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        let w = data
            .get(e.weight_offset..e.weight_offset + e.weight_len)
            .ok_or_else(|| Error::Format("weight buffer out of range".into()))?;
        let b = data
            .get(e.bias_offset..e.bias_offset + 4 * e.bias_len)
            .ok_or_else(|| Error::Format("bias buffer out of range".into()))?;
        layers.push(IntLayer {
            op: e.op,
            weight: w.iter().map(|&v| v as i8).collect(),
            bias: b
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            requant: e.requant,
        });
    }
    let o = m.eps_offset;
    let mut scales = Vec::with_capacity(layers.len());
    for (k, l) in layers.iter().enumerate() {
        let base = o + 16 + 24 * k;
        scales.push(LayerScale {
            eps_in: f64_at(&data, base)?,
            eps_w: f64_at(&data, base + 8)?,
            eps_out: f64_at(&data, base + 16)?,
            requant: l.requant,
        });
    }
    Ok(IntegerGraph {
        name: m.name,
        input: m.input,
        input_eps: f64_at(&data, o)?,
        output_eps: f64_at(&data, o + 8)?,
        layers,
        scales,
    })
}

pub fn save_integer_graph(path: &Path, g: &IntegerGraph) -> Result<()> {
    let mut buf = Vec::new();
    write_integer_graph(&mut buf, g)?;
    write_atomic(path, &buf)
}

pub fn load_integer_graph(path: &Path) -> Result<IntegerGraph> {
    read_integer_graph(std::io::BufReader::new(std::fs::File::open(path)?))
}
