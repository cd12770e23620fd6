//! Versioned binary checkpoints. Little-endian throughout:
//!
//! ```text
//! magic "INFNCKPT" | version u32 | config json (u64 len + bytes)
//! | meta json (u64 len + bytes) | tensor count u64
//! | per tensor: name (u64 len + bytes), dtype tag u8, rank u64,
//!   dims u64 x rank, payload offset u64, numel u64
//! | payload blob
//! ```
//!
//! Offsets are relative to the end of the table, so the header and table can
//! be read without touching tensor data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DecoderWeights, ModelConfig};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"INFNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub offset: u64,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: Value,
    pub tensors: Vec<TensorInfo>,
    pub total_params: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read, cap: u64) -> Result<Vec<u8>> {
    let len = read_u64(r)?;
    if len > cap {
        return Err(bad(format!("length field {len} exceeds sanity cap {cap}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Write config, metadata and named tensors. Tensor order is preserved.
pub fn save_tensors<S: Scalar>(
    path: &Path,
    config: &ModelConfig,
    meta: &Value,
    tensors: &[(String, &Tensor<S>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_bytes(&mut w, serde_json::to_string(config).map_err(|e| bad(e.to_string()))?.as_bytes())?;
    write_bytes(&mut w, serde_json::to_string(meta).map_err(|e| bad(e.to_string()))?.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in tensors {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&[S::DTYPE.tag()])?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&(t.numel() as u64).to_le_bytes())?;
        offset += (t.numel() * S::DTYPE.size()) as u64;
    }
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.numel() * S::DTYPE.size());
        for v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(ModelConfig, Value, Vec<TensorInfo>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, not a checkpoint file")));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config: ModelConfig = serde_json::from_slice(&read_bytes(r, 1 << 24)?)
        .map_err(|e| bad(format!("config block: {e}")))?;
    let meta: Value = serde_json::from_slice(&read_bytes(r, 1 << 24)?)
        .map_err(|e| bad(format!("meta block: {e}")))?;
    let count = read_u64(r)?;
    if count > 1 << 24 {
        return Err(bad(format!("implausible tensor count {count}")));
    }
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(r, 1 << 16)?)
            .map_err(|e| bad(format!("tensor name: {e}")))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = Dtype::from_tag(tag[0]).ok_or_else(|| bad(format!("unknown dtype tag {}", tag[0])))?;
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(bad(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let offset = read_u64(r)?;
        let numel = read_u64(r)? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(bad(format!("numel {numel} does not match shape {shape:?} for {name}")));
        }
        tensors.push(TensorInfo { name, dtype, shape, numel, offset });
    }
    Ok((config, meta, tensors))
}

/// Header and table only; payload bytes are never read.
pub fn inspect(path: &Path) -> Result<Summary> {
    let mut r = BufReader::new(File::open(path)?);
    let (config, meta, tensors) = read_header(&mut r)?;
    let total_params = tensors.iter().map(|t| t.numel).sum();
    Ok(Summary { version: VERSION, config, meta, tensors, total_params })
}

/// Load every tensor. The stored dtype must match `S` exactly; checkpoints
/// never convert precision silently.
pub fn load_tensors<S: Scalar>(path: &Path) -> Result<(ModelConfig, Value, Vec<(String, Tensor<S>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (config, meta, infos) = read_header(&mut r)?;
    let base = r.stream_position()?;
    let mut out = Vec::with_capacity(infos.len());
    for info in infos {
        if info.dtype != S::DTYPE {
            return Err(bad(format!(
                "tensor {} stored as {} but {} was requested",
                info.name,
                info.dtype,
                S::DTYPE
            )));
        }
        r.seek(SeekFrom::Start(base + info.offset))?;
        let mut raw = vec![0u8; info.numel * S::DTYPE.size()];
        r.read_exact(&mut raw)?;
        let data: Vec<S> = raw.chunks_exact(S::DTYPE.size()).map(S::read_le).collect();
        out.push((info.name, Tensor::from_vec(&info.shape, data)?));
    }
    Ok((config, meta, out))
}

/// Rebuild decoder weights from named tensors; every expected tensor must be
/// present with the exact shape, and nothing extra under the model namespace.
pub fn weights_from_named<S: Scalar>(
    cfg: &ModelConfig,
    pairs: &mut std::collections::BTreeMap<String, Tensor<S>>,
) -> Result<DecoderWeights<S>> {
    cfg.validate()?;
    let mut w = DecoderWeights::init(cfg, 0)?;
    for (name, slot) in w.named_mut() {
        let t = pairs
            .remove(&name)
            .ok_or_else(|| bad(format!("checkpoint is missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(w)
}

pub fn save_model<S: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    weights: &DecoderWeights<S>,
    meta: &Value,
) -> Result<()> {
    save_tensors(path, cfg, meta, &weights.named())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<(ModelConfig, DecoderWeights<S>, Value)> {
    let (cfg, meta, tensors) = load_tensors(path)?;
    let mut map: std::collections::BTreeMap<String, Tensor<S>> = tensors.into_iter().collect();
    let w = weights_from_named(&cfg, &mut map)?;
    let leftovers: Vec<&String> = map.keys().filter(|k| !k.starts_with("opt.")).collect();
    if !leftovers.is_empty() {
        return Err(bad(format!("unexpected tensors in checkpoint: {leftovers:?}")));
    }
    Ok((cfg, w, meta))
}
