//! Parameter checkpoints: a flat binary file of row-major little-endian
//! f64 values plus a JSON index mapping tensor names to shapes and
//! offsets. Round trips are bit-exact.

use super::{Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the binary file, in f64 units.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub tensors: Vec<TensorRecord>,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Contract(format!("checkpoint I/O: {e}"))
}

/// Write `(name, tensor)` pairs to `<bin_path>` with the index at
/// `<index_path>`.
pub fn save_checkpoint(
    bin_path: &Path,
    index_path: &Path,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut index = CheckpointIndex { tensors: Vec::with_capacity(tensors.len()) };
    let mut bin: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        index.tensors.push(TensorRecord {
            name: name.clone(),
            shape: vec![t.rows(), t.cols()],
            offset,
            len: t.len() as u64,
        });
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len() as u64;
    }
    let mut f = fs::File::create(bin_path).map_err(io_err)?;
    f.write_all(&bin).map_err(io_err)?;
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| TensorError::Contract(format!("checkpoint index encode: {e}")))?;
    fs::write(index_path, json).map_err(io_err)?;
    Ok(())
}

/// Read a checkpoint back as `(name, tensor)` pairs in index order.
pub fn load_checkpoint(bin_path: &Path, index_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let index: CheckpointIndex = serde_json::from_str(
        &fs::read_to_string(index_path).map_err(io_err)?,
    )
    .map_err(|e| TensorError::Contract(format!("checkpoint index decode: {e}")))?;
    let bin = fs::read(bin_path).map_err(io_err)?;
    let mut out = Vec::with_capacity(index.tensors.len());
    for rec in &index.tensors {
        if rec.shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "tensor {} has rank {} index entry",
                rec.name,
                rec.shape.len()
            )));
        }
        let start = rec.offset as usize * 8;
        let end = start + rec.len as usize * 8;
        if end > bin.len() || rec.shape[0] * rec.shape[1] != rec.len as usize {
            return Err(TensorError::Contract(format!(
                "tensor {} index entry inconsistent with binary payload",
                rec.name
            )));
        }
        let data: Vec<f64> = bin[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((rec.name.clone(), Tensor::from_vec(rec.shape[0], rec.shape[1], data)?));
    }
    Ok(out)
}
