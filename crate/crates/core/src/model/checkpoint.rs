//! Checkpoint file format.
//!
//! ```text
//! "NATLAS01" | u64 LE header length | UTF-8 JSON header | f32 LE blob
//! ```
//!
//! The header carries the [`ModelConfig`] and a name/shape/offset table; offsets
//! are byte offsets into the blob. Tensors are laid out in [`tensor_layout`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_layout, Checkpoint, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NATLAS01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let layout = tensor_layout(&ckpt.config);
    let tensors = ckpt.tensors();
    let mut entries = Vec::with_capacity(layout.len());
    let mut offset = 0;
    for ((name, shape), data) in layout.into_iter().zip(&tensors) {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                tensor: name,
                detail: format!("expected {numel} elements, holds {}", data.len()),
            });
        }
        entries.push(TensorEntry { name, shape, offset });
        offset += numel * 4;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        tensors: entries,
    })?;

    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::CorruptHeader(format!(
            "file is {} bytes, shorter than the fixed preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptHeader(format!("header length {header_len} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::CorruptHeader(format!("header JSON: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    let config = header.config;
    if let Err(Error::InvalidConfig(detail)) = config.validate() {
        // An invalid config cannot determine tensor shapes; report it against
        // the tensor that exposes the violation.
        let tensor = if config.n_heads == 0 || !config.d_model.is_multiple_of(config.n_heads.max(1)) {
            "layers.0.attn.wq"
        } else {
            "config"
        };
        return Err(Error::ShapeMismatch { tensor: tensor.into(), detail });
    }

    let layout = tensor_layout(&config);
    if header.tensors.len() != layout.len() {
        return Err(Error::ShapeMismatch {
            tensor: "<table>".into(),
            detail: format!("expected {} tensors, header lists {}", layout.len(), header.tensors.len()),
        });
    }
    let blob = &bytes[header_end..];
    let mut ckpt = Checkpoint::zeros(config)?;
    let mut expected_offset = 0;
    let mut total = 0;
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if &entry.name != name {
            return Err(Error::ShapeMismatch {
                tensor: entry.name.clone(),
                detail: format!("expected tensor `{name}` at this position"),
            });
        }
        if &entry.shape != shape {
            return Err(Error::ShapeMismatch {
                tensor: name.clone(),
                detail: format!("expected shape {shape:?}, header says {:?}", entry.shape),
            });
        }
        if entry.offset != expected_offset {
            return Err(Error::CorruptHeader(format!(
                "tensor `{name}` at offset {} (expected {expected_offset})",
                entry.offset
            )));
        }
        let numel: usize = shape.iter().product();
        expected_offset += numel * 4;
        total += numel * 4;
    }
    if blob.len() != total {
        if blob.len() < total {
            return Err(Error::TruncatedBlob { expected: total, found: blob.len() });
        }
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after blob",
            blob.len() - total
        )));
    }
    let mut cursor = 0;
    for t in ckpt.tensors_mut() {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(blob[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
        }
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}
