//! Binary feature files.
//!
//! Layout (little-endian): magic `FBK1`, `u32` frame count, `u32` feature dim,
//! then `frames × dim` IEEE-754 `f32` values in row-major order.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FBK1";
const HEADER: usize = 12;

pub fn encode_features(m: &Tensor) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::arg("feature matrix contains non-finite values"));
    }
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = Vec::with_capacity(HEADER + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated header ({} of {HEADER} bytes)", bytes.len()),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if cols == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: "feature dim must be positive".into(),
        });
    }
    let expected = HEADER + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            msg: format!(
                "payload size mismatch: {rows}x{cols} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn write_features(path: &Path, m: &Tensor) -> Result<()> {
    std::fs::write(path, encode_features(m)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}
