//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, u64 little-endian header length, JSON header
//! (model config, step counter, run config, tensor index, average-posmap
//! validity), then the f32 little-endian tensor payload. The category's
//! average position map rides along as a pseudo-tensor so prediction
//! needs nothing but the checkpoint and an image.

use crate::error::{Result, SurfmapError};
use crate::geometry::{Grid, PositionMap};
use crate::model::net::{Model, ModelConfig};
use crate::synthgen::{pack_bits, unpack_bits};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SURFMAP1";
const AVG_TENSOR: &str = "avg_posmap";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    step: u64,
    run_config: serde_json::Value,
    avg_validity_bits: String,
    avg_validity_len: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
    offset: usize,
}

/// A checkpoint loaded back into memory.
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub avg_posmap: PositionMap,
    pub run_config: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    step: u64,
    avg_posmap: &PositionMap,
    run_config: serde_json::Value,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, data) in model.param_tensors() {
        // offsets are in f32 elements
        tensors.push(TensorEntry {
            name: name.to_string(),
            len: data.len(),
            offset: payload.len() / 4,
        });
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let avg_f32 = avg_posmap.grid().to_f32();
    tensors.push(TensorEntry {
        name: AVG_TENSOR.to_string(),
        len: avg_f32.len(),
        offset: payload.len() / 4,
    });
    for x in &avg_f32 {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    let header = Header {
        model_config: model.config.clone(),
        step,
        run_config,
        avg_validity_bits: pack_bits(avg_posmap.validity()),
        avg_validity_len: avg_posmap.validity().len(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| SurfmapError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(SurfmapError::Data("not a surfmap checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(SurfmapError::Data("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload = &bytes[16 + header_len..];

    let mut model = Model::new(&header.model_config, 0)?;
    let mut avg_grid: Option<Vec<f32>> = None;
    let mut loaded = std::collections::HashMap::new();
    for entry in &header.tensors {
        let bytes = payload
            .get(entry.offset * 4..(entry.offset + entry.len) * 4)
            .ok_or_else(|| SurfmapError::Data("tensor out of payload bounds".into()))?;
        let data: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if entry.name == AVG_TENSOR {
            avg_grid = Some(data);
        } else {
            loaded.insert(entry.name.clone(), data);
        }
    }
    for (name, tensor) in model.param_tensors_mut() {
        let data = loaded
            .remove(name)
            .ok_or_else(|| SurfmapError::Data(format!("checkpoint missing tensor {name}")))?;
        if data.len() != tensor.len() {
            return Err(SurfmapError::Data(format!("tensor {name} length mismatch")));
        }
        *tensor = data;
    }
    if !loaded.is_empty() {
        return Err(SurfmapError::Data(format!(
            "checkpoint has {} unknown tensors",
            loaded.len()
        )));
    }
    let avg_raw =
        avg_grid.ok_or_else(|| SurfmapError::Data("checkpoint missing average posmap".into()))?;
    let s = header.model_config.posmap_resolution;
    let validity = unpack_bits(&header.avg_validity_bits, header.avg_validity_len)?;
    let avg_posmap = PositionMap::new(Grid::<3>::from_f32(s, s, &avg_raw)?, validity)?;
    Ok(Checkpoint { model, step: header.step, avg_posmap, run_config: header.run_config })
}
