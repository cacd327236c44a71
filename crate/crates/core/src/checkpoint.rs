//! Binary tensor container ("BOTT1") plus a JSON sidecar describing the model.
//!
//! Layout: magic `BOTT1`, `u32` tensor count, then per tensor `u32` name
//! length, name bytes, `u32` rank and `u32` dims; after the manifest, the
//! little-endian `f32` payloads in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{BottError, Result};
use crate::io::{read_json, write_json};
use crate::network::{Network, NetworkConfig, Params};

pub const MAGIC: &[u8; 5] = b"BOTT1";

/// Everything needed to rebuild a network and interpret its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub network: NetworkConfig,
    pub class_names: Vec<String>,
    /// Window length used in training.
    pub train_k: usize,
    pub train_hz: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_tensors(path: &Path, names: &[String], tensors: &[Tensor<f32>]) -> Result<()> {
    let file = File::create(path).map_err(|e| BottError::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_tensors(&mut w, names, tensors)
        .and_then(|_| w.flush())
        .map_err(|e| BottError::io(path, e))
}

pub fn encode_tensors(w: &mut impl Write, names: &[String], tensors: &[Tensor<f32>]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in names.iter().zip(tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
    }
    for t in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| BottError::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode_tensors(r: &mut impl Read) -> Result<(Vec<String>, Vec<Tensor<f32>>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| BottError::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(BottError::Checkpoint("bad magic, not a BOTT1 file".into()));
    }
    let count = read_u32(r)? as usize;
    let mut names = Vec::with_capacity(count.min(4096));
    let mut shapes = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(BottError::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| BottError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| BottError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(BottError::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        names.push(name);
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in names.iter().zip(shapes) {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| BottError::Checkpoint(format!("truncated payload for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| BottError::Checkpoint(e.to_string()))? != 0 {
        return Err(BottError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((names, tensors))
}

pub fn read_tensors(path: &Path) -> Result<(Vec<String>, Vec<Tensor<f32>>)> {
    let file = File::open(path).map_err(|e| BottError::io(path, e))?;
    decode_tensors(&mut BufReader::new(file))
}

/// Writes the parameters and the metadata sidecar.
pub fn save_model(path: &Path, net: &Network, meta: &ModelMeta) -> Result<()> {
    write_tensors(path, &net.params.names, &net.params.tensors)?;
    write_json(meta, &sidecar_path(path))
}

pub fn load_model(path: &Path) -> Result<(Network, ModelMeta)> {
    let meta: ModelMeta = read_json(&sidecar_path(path))?;
    let (names, tensors) = read_tensors(path)?;
    let params = Params::new(names, tensors)?;
    let net = Network::new(meta.network.clone(), params)?;
    Ok((net, meta))
}
