//! On-disk formats: MICL1 checkpoints (JSON header + little-endian f64
//! payload) and sequence batches (flat little-endian u16 states with a JSON
//! sidecar).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::Sequence;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MICL1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
}

/// Writes named tensors: magic, u32 header length, JSON header, raw payload.
pub fn write_checkpoint(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: "f64".to_string(),
            byte_offset: offset,
        });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&CheckpointHeader { version: 1, tensors: entries })?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::contract("not a MICL1 checkpoint"));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    header
        .tensors
        .iter()
        .map(|e| {
            if e.dtype != "f64" {
                return Err(Error::contract(format!("unsupported dtype {}", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let bytes = payload
                .get(e.byte_offset..e.byte_offset + count * 8)
                .ok_or_else(|| Error::contract("truncated checkpoint payload"))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((e.name.clone(), Tensor::from_vec(&e.shape, data)?))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SequenceBatchSidecar {
    pub n: usize,
    pub batch: usize,
    pub c: usize,
    pub seed: u64,
}

/// Flat little-endian u16 states plus a JSON sidecar describing the batch.
pub fn write_sequence_batch(
    bin_path: &Path,
    sidecar_path: &Path,
    seqs: &[Sequence],
    c: usize,
    seed: u64,
) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::parameter("empty sequence batch"));
    }
    let n = seqs[0].len();
    if seqs.iter().any(|s| s.len() != n) {
        return Err(Error::contract("sequence batch must share a length"));
    }
    let mut buf = Vec::with_capacity(seqs.len() * n * 2);
    for s in seqs {
        for &v in &s.states {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(bin_path, buf)?;
    let sidecar = SequenceBatchSidecar { n, batch: seqs.len(), c, seed };
    std::fs::write(sidecar_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_sequence_batch(bin_path: &Path, sidecar_path: &Path) -> Result<(Vec<Sequence>, SequenceBatchSidecar)> {
    let sidecar: SequenceBatchSidecar =
        serde_json::from_slice(&std::fs::read(sidecar_path)?)?;
    let raw = std::fs::read(bin_path)?;
    if raw.len() != sidecar.batch * sidecar.n * 2 {
        return Err(Error::contract("binary size does not match sidecar"));
    }
    let states: Vec<u16> = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if states.iter().any(|&s| (s as usize) >= sidecar.c) {
        return Err(Error::contract("state out of range for sidecar c"));
    }
    let seqs = states
        .chunks_exact(sidecar.n)
        .map(|chunk| Sequence { states: chunk.to_vec(), task_index: None })
        .collect();
    Ok((seqs, sidecar))
}

/// Serializes the transformer parameter set to a MICL1 file.
pub fn write_transformer_checkpoint(
    path: &Path,
    params: &crate::transformer::TransformerParams,
) -> Result<()> {
    let ps = params.to_param_set();
    let refs: Vec<(&str, &Tensor)> =
        ps.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_checkpoint(path, &refs)
}
