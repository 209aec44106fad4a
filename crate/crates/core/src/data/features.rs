//! Binary feature files.
//!
//! Layout: magic `IMBF`, then little-endian `u32` version, `u32` frame count
//! `T`, `u32` dimension `d`, followed by `T * d` little-endian `f32` values in
//! row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"IMBF";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(features: &Tensor<f32>) -> Result<Vec<u8>> {
    let (t, d) = features.dims2()?;
    let mut buf = Vec::with_capacity(16 + 4 * t * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing IMBF header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported feature version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(bad(format!("empty feature matrix {t}x{d}")));
    }
    let expected = 16 + 4 * t * d;
    if bytes.len() != expected {
        return Err(bad(format!(
            "{t}x{d} features need {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let bytes = encode_features(features)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode_features(&bytes, path)
}
