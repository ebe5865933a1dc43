//! Graph documents (`netgraph/v1`, JSON) and binary weight checkpoints.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic  "SLIMCKPT"            8 bytes
//! u32    format version (1)
//! u64    graph document length, then that many bytes of JSON
//! u32    record count
//! record: u32 id length, id bytes (UTF-8), u32 tensor count, then per tensor:
//!         u32 name length, name bytes, u32 rank, rank x u32 dims, f32 data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use super::{BatchNormParams, ConvWeights, LayerSpec, LayerWeights, NetworkGraph};
use crate::error::{Error, Result};

pub const GRAPH_SCHEMA: &str = "netgraph/v1";
const MAGIC: &[u8; 8] = b"SLIMCKPT";
const VERSION: u32 = 1;

/// Human-readable description of a graph's layers (no weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub schema: String,
    pub layers: Vec<LayerSpec>,
}

impl GraphDocument {
    pub fn of(net: &NetworkGraph) -> Self {
        Self {
            schema: GRAPH_SCHEMA.to_string(),
            layers: net.layers().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        if doc.schema != GRAPH_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported graph schema `{}` (expected `{GRAPH_SCHEMA}`)",
                doc.schema
            )));
        }
        Ok(doc)
    }
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: impl Iterator<Item = f32>,
) -> Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(shape.len() as u32)?;
    for &d in shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint("implausible string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non UTF-8 identifier".into()))
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, RawTensor)> {
    let name = read_string(r)?;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has rank {rank}"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Ok((name, RawTensor { shape, data }))
}

/// Writes the graph document and every parameter tensor to `path`.
pub fn save_checkpoint(net: &NetworkGraph, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let doc = GraphDocument::of(net).to_json()?;
    w.write_u64::<LittleEndian>(doc.len() as u64)?;
    w.write_all(doc.as_bytes())?;
    w.write_u32::<LittleEndian>(net.weights().len() as u32)?;
    for (id, weights) in net.weights() {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
        match weights {
            LayerWeights::Conv(c) => {
                w.write_u32::<LittleEndian>(1 + c.bias.is_some() as u32)?;
                write_tensor(&mut w, "weight", c.weight.shape(), c.weight.iter().copied())?;
                if let Some(b) = &c.bias {
                    write_tensor(&mut w, "bias", &[b.len()], b.iter().copied())?;
                }
            }
            LayerWeights::Bn(b) => {
                w.write_u32::<LittleEndian>(5)?;
                let n = [b.gamma.len()];
                write_tensor(&mut w, "gamma", &n, b.gamma.iter().copied())?;
                write_tensor(&mut w, "beta", &n, b.beta.iter().copied())?;
                write_tensor(&mut w, "running_mean", &n, b.running_mean.iter().copied())?;
                write_tensor(&mut w, "running_var", &n, b.running_var.iter().copied())?;
                write_tensor(&mut w, "epsilon", &[1], std::iter::once(b.epsilon))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<NetworkGraph> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let doc_len = r.read_u64::<LittleEndian>()? as usize;
    let mut doc = vec![0u8; doc_len];
    r.read_exact(&mut doc)?;
    let doc = GraphDocument::from_json(
        std::str::from_utf8(&doc)
            .map_err(|_| Error::Checkpoint("graph document is not UTF-8".into()))?,
    )?;

    let n_records = r.read_u32::<LittleEndian>()?;
    let mut weights = IndexMap::new();
    for _ in 0..n_records {
        let id = read_string(&mut r)?;
        let n_tensors = r.read_u32::<LittleEndian>()?;
        let mut tensors: IndexMap<String, RawTensor> = IndexMap::new();
        for _ in 0..n_tensors {
            let (name, t) = read_tensor(&mut r)?;
            tensors.insert(name, t);
        }
        let take1 =
            |tensors: &mut IndexMap<String, RawTensor>, name: &str| -> Result<Array1<f32>> {
                let t = tensors
                    .shift_remove(name)
                    .ok_or_else(|| Error::Checkpoint(format!("`{id}` lacks tensor `{name}`")))?;
                Ok(Array1::from_vec(t.data))
            };
        let entry = if tensors.contains_key("weight") {
            let t = tensors.shift_remove("weight").unwrap();
            if t.shape.len() != 4 {
                return Err(Error::Checkpoint(format!("`{id}` weight is not rank 4")));
            }
            let weight =
                Array4::from_shape_vec((t.shape[0], t.shape[1], t.shape[2], t.shape[3]), t.data)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = if tensors.contains_key("bias") {
                Some(take1(&mut tensors, "bias")?)
            } else {
                None
            };
            LayerWeights::Conv(ConvWeights { weight, bias })
        } else {
            let gamma = take1(&mut tensors, "gamma")?;
            let beta = take1(&mut tensors, "beta")?;
            let running_mean = take1(&mut tensors, "running_mean")?;
            let running_var = take1(&mut tensors, "running_var")?;
            let epsilon = take1(&mut tensors, "epsilon")?[0];
            LayerWeights::Bn(BatchNormParams {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
            })
        };
        weights.insert(id, entry);
    }
    NetworkGraph::new(doc.layers, weights)
}
