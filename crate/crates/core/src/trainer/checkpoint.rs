//! Binary checkpoint format.
//!
//! Layout: the magic bytes `CLLB1`, a little-endian `u32` byte length, that
//! many bytes of UTF-8 JSON metadata, then every parameter block in
//! declaration order as row-major little-endian `f32`.

use crate::encoder::{EncoderConfig, EncoderParams, BLOCK_NAMES};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"CLLB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub tensors: Vec<TensorMeta>,
    pub seed: u64,
    pub step: u64,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path, seed: u64, step: u64, config: serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        encoder: params.config.clone(),
        tensors: BLOCK_NAMES
            .iter()
            .zip(params.blocks())
            .map(|(name, b)| TensorMeta {
                name: name.to_string(),
                rows: b.rows(),
                cols: b.cols(),
            })
            .collect(),
        seed,
        step,
        config,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("metadata encoding: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("metadata block too large".into()))?;
    let payload: usize = params.blocks().iter().map(|b| b.as_slice().len()).sum();
    let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 4 * payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(&json);
    for block in params.blocks() {
        for &v in block.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encoder field that determines dimension `axis` (0 rows, 1 cols) of block `b`.
fn governing_field(block: usize, axis: usize) -> &'static str {
    const FIELDS: [[&str; 2]; 5] = [
        ["vocab_size", "embed_dim"],
        ["embed_dim", "hidden_dim"],
        ["bias_rows", "hidden_dim"],
        ["hidden_dim", "out_dim"],
        ["bias_rows", "out_dim"],
    ];
    FIELDS[block][axis]
}

fn validate_meta(meta: &CheckpointMeta) -> Result<()> {
    let expected = EncoderParams::block_shapes(&meta.encoder);
    if meta.tensors.len() != BLOCK_NAMES.len() {
        return Err(Error::Format(format!(
            "tensors: expected {} entries, found {}",
            BLOCK_NAMES.len(),
            meta.tensors.len()
        )));
    }
    for (b, (t, (rows, cols))) in meta.tensors.iter().zip(expected).enumerate() {
        if t.name != BLOCK_NAMES[b] {
            return Err(Error::Format(format!(
                "tensors[{b}].name: expected {}, found {}",
                BLOCK_NAMES[b], t.name
            )));
        }
        for (axis, (want, got)) in [(rows, t.rows), (cols, t.cols)].into_iter().enumerate() {
            if want != got {
                return Err(Error::Format(format!(
                    "{}: metadata implies {want} but tensor {} has {got}",
                    governing_field(b, axis),
                    t.name
                )));
            }
        }
    }
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing CLLB1 magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::Format("truncated before metadata length".into()));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(Error::Format(format!(
            "truncated metadata: need {len} bytes, found {}",
            rest.len()
        )));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    meta.encoder
        .validate()
        .map_err(|e| Error::Format(format!("encoder metadata: {e}")))?;
    validate_meta(&meta)?;
    let payload = &rest[len..];
    let shapes = EncoderParams::block_shapes(&meta.encoder);
    let need: usize = shapes.iter().map(|(r, c)| 4 * r * c).sum();
    if payload.len() != need {
        return Err(Error::Format(format!(
            "parameter payload: expected {need} bytes, found {}",
            payload.len()
        )));
    }
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(shapes.len());
    for (b, (rows, cols)) in shapes.into_iter().enumerate() {
        let count = rows * cols;
        let values: Vec<f64> = payload[offset..offset + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        offset += 4 * count;
        let m = Matrix::from_vec(rows, cols, values)
            .map_err(|e| Error::Format(format!("tensor {}: {e}", BLOCK_NAMES[b])))?;
        blocks.push(m);
    }
    let params = EncoderParams::from_blocks(meta.encoder.clone(), blocks)?;
    Ok(Checkpoint { params, meta })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
