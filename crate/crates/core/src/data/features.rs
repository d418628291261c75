//! Binary feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `XVF1`                  |
//! | 4      | 4         | `u32` feature dim F           |
//! | 8      | 8         | `u64` frame count T           |
//! | 16     | 4·T·F     | `f32` values, row-major T×F   |

use std::fs;
use std::path::Path;

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XVF1";
pub const HEADER_LEN: usize = 16;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::dim("write_features", "features must be [T×F]"));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite { op: "write_features" });
    }
    let (t, f) = (features.rows(), features.cols());
    let f32_dim = u32::try_from(f).map_err(|_| Error::dim("write_features", "feature dim exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&f32_dim.to_le_bytes());
    out.extend_from_slice(&(t as u64).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let f = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let t = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if f == 0 {
        return Err(format_err(4, "feature dim is zero"));
    }
    let t = usize::try_from(t).map_err(|_| format_err(8, "frame count overflows"))?;
    let expected = t
        .checked_mul(f)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(8, "frame count overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated data: header declares {t}×{f} values ({expected} bytes)"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            expected,
            format!("dim mismatch: {} trailing bytes after {t}×{f} values", bytes.len() - expected),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t, f], data)
}

pub fn write_features(seq: &FrameSequence, path: &Path) -> Result<()> {
    let bytes = encode_features(&seq.features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the sequence id is the file stem and the speaker
/// is unknown.
pub fn read_features(path: &Path) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let features = decode_features(&bytes)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FrameSequence::new(id, None, features))
}
