//! Binary tensor sidecar files.
//!
//! Rank-4 tensors (latents, flow fields, null trajectories) share one layout:
//!
//! ```text
//! offset 0   u32 LE  dim0
//! offset 4   u32 LE  dim1
//! offset 8   u32 LE  dim2
//! offset 12  u32 LE  dim3
//! offset 16  f32 LE  data, row-major (last axis fastest)
//! ```
//!
//! Weight files are a sequence of matrices, each `u32 rows, u32 cols` followed
//! by `rows * cols` row-major f32 values, until end of file.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

fn io_err(path: &Path, source: io::Error) -> TensorIoError {
    TensorIoError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> TensorIoError {
    TensorIoError::Format { path: path.display().to_string(), reason: reason.into() }
}

pub fn encode_tensor4(t: &Array4<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor4(bytes: &[u8]) -> Result<Array4<f64>, String> {
    if bytes.len() < 16 {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let shape = (dim(0), dim(1), dim(2), dim(3));
    let count = shape.0 * shape.1 * shape.2 * shape.3;
    let body = &bytes[16..];
    if body.len() != 4 * count {
        return Err(format!(
            "dims {:?} need {} data bytes, found {}",
            shape,
            4 * count,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array4::from_shape_vec(shape, data).expect("length checked"))
}

pub fn write_tensor4(path: &Path, t: &Array4<f64>) -> Result<(), TensorIoError> {
    fs::write(path, encode_tensor4(t)).map_err(|e| io_err(path, e))
}

pub fn read_tensor4(path: &Path) -> Result<Array4<f64>, TensorIoError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_tensor4(&bytes).map_err(|r| format_err(path, r))
}

pub fn write_matrices(path: &Path, mats: &[&Array2<f64>]) -> Result<(), TensorIoError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    for m in mats {
        buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for v in m.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn read_matrices(path: &Path) -> Result<Vec<Array2<f64>>, TensorIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let mut mats = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(format_err(path, "truncated matrix header"));
        }
        let rows = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let len = 4 * rows * cols;
        if bytes.len() - pos < len {
            return Err(format_err(path, format!("truncated {rows}x{cols} matrix body")));
        }
        let data = bytes[pos..pos + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        mats.push(Array2::from_shape_vec((rows, cols), data).expect("length checked"));
        pos += len;
    }
    Ok(mats)
}
