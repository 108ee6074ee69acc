//! Feature files: `"SERF"` | u32 version (1) | u32 frames | u32 dim | f32 LE row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Result, SerError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SERF";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encode_features(x: &Tensor) -> Result<Vec<u8>> {
    if x.rank() != 2 {
        return Err(SerError::Validation(format!(
            "features must be [T×D], got {:?}",
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * x.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u32).to_le_bytes());
    for &v in x.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> std::result::Result<Tensor, String> {
    if buf.len() < HEADER || &buf[..4] != MAGIC {
        return Err("not a SERF feature file".into());
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(format!("unsupported feature version {}", word(4)));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    if frames == 0 || dim == 0 {
        return Err(format!("empty feature matrix {frames}×{dim}"));
    }
    let want = HEADER + 4 * frames * dim;
    if buf.len() != want {
        return Err(format!("expected {want} bytes for {frames}×{dim}, found {}", buf.len()));
    }
    let data = buf[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![frames, dim], data).map_err(|e| e.to_string())
}

pub fn write_features(path: &Path, x: &Tensor) -> Result<()> {
    let bytes = encode_features(x)?;
    fs::write(path, bytes).map_err(|e| SerError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| SerError::io(path, e))?;
    decode_features(&buf).map_err(|d| SerError::format(path, d))
}
