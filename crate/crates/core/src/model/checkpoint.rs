//! `NRVC` checkpoints: a named-tensor index in the same little-endian
//! style as the `NRV1` data container.
//!
//! ```text
//! "NRVC" | u32 version | u32 entry count
//! per entry: u16 name_len | name (UTF-8) | u32 rank | rank x u32 dims | f64 payload
//! ```
//!
//! The head count is stored as the one-element entry `config.heads`; every
//! other shape is implied by the tensors.

use std::collections::HashMap;
use std::path::Path;

use super::params::{ModelConfig, ModelParams, ParamTree};
use crate::error::{NarvidError, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRVC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADS_ENTRY: &str = "config.heads";

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut entries =
        vec![(HEADS_ENTRY.to_owned(), Tensor::from_parts_unchecked(vec![1], vec![params.config.heads as f64]))];
    entries.extend(params.flatten());
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(msg: impl Into<String>) -> NarvidError {
    NarvidError::Format(format!("checkpoint: {}", msg.into()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| format_err("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("missing NRVC magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut entries: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?).map_err(|_| format_err("entry name is not UTF-8"))?.to_owned();
        let rank = u32_at(take(4)?) as usize;
        if rank > 8 {
            return Err(format_err(format!("entry {name} has rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let payload = take(n.checked_mul(8).ok_or_else(|| format_err("entry too large"))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t =
            Tensor::new(shape, data).map_err(|e| NarvidError::Validation(format!("checkpoint entry {name}: {e}")))?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(format_err(format!("duplicate entry {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(format_err("trailing bytes"));
    }

    let heads = entries.remove(HEADS_ENTRY).ok_or_else(|| format_err("missing config.heads"))?.item();
    let positional = entries.get("positional").ok_or_else(|| format_err("missing positional"))?;
    let w1 = entries.get("co_video.ffn.w1").ok_or_else(|| format_err("missing co_video.ffn.w1"))?;
    let config = ModelConfig {
        dim: positional.cols(),
        heads: heads as usize,
        max_frames: positional.rows(),
        ffn_hidden: w1.cols(),
    };
    config.validate()?;
    let weights = config.shapes().try_map("", &mut |name, shape: &Vec<usize>| {
        let t = entries.remove(name).ok_or_else(|| format_err(format!("missing entry {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(format_err(format!("entry {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    })?;
    if let Some(extra) = entries.keys().next() {
        return Err(format_err(format!("unknown entry {extra}")));
    }
    Ok(ModelParams { config, weights })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| NarvidError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NarvidError::io(path, e))?;
    decode_checkpoint(&bytes)
}
