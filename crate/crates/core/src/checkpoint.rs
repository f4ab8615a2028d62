//! Versioned binary checkpoints: magic bytes, a JSON header (model
//! config, training metadata, quantizer state, tensor directory), the
//! raw little-endian f32 tensor payload, and a trailing CRC-32 over
//! that payload. Save/load round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::net::{Model, ModelState, QuantState, TensorEntry};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RBCL";
const VERSION: u32 = 1;

/// Training provenance carried inside the checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epoch: usize,
    pub losses: Vec<f64>,
    pub stage: String,
}

#[derive(Serialize, Deserialize)]
struct TensorDirEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: crate::net::ModelConfig,
    meta: TrainMeta,
    quants: Vec<QuantState>,
    tensors: Vec<TensorDirEntry>,
}

/// CRC-32 (IEEE 802.3, reflected) over a byte stream.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub fn save_checkpoint(path: &Path, model: &mut Model<f32>, meta: &TrainMeta) -> Result<()> {
    let state = model.export_state();
    let header = Header {
        config: model.config.clone(),
        meta: meta.clone(),
        quants: state.quants.clone(),
        tensors: state
            .tensors
            .iter()
            .map(|t| TensorDirEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    for t in &state.tensors {
        for &v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, TrainMeta)> {
    let bytes = std::fs::read(path)?;
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Checkpoint(format!(
                "truncated checkpoint: {} bytes, expected at least {n}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(16)?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is newer than supported version {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(16 + header_len + 4)?;
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;

    let n_values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload_start = 16 + header_len;
    let payload_len = n_values * 4;
    need(payload_start + payload_len + 4)?;
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored_crc = u32::from_le_bytes(
        bytes[payload_start + payload_len..payload_start + payload_len + 4]
            .try_into()
            .unwrap(),
    );
    if crc32(payload) != stored_crc {
        return Err(Error::Checkpoint("tensor payload checksum mismatch".into()));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0usize;
    for dir in &header.tensors {
        let n: usize = dir.shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += n * 4;
        tensors.push(TensorEntry {
            name: dir.name.clone(),
            shape: dir.shape.clone(),
            data,
        });
    }
    let state = ModelState {
        tensors,
        quants: header.quants,
    };
    let mut model = Model::build(&header.config, 0)?;
    model.import_state(&state)?;
    Ok((model, header.meta))
}
