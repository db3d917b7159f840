//! Binary feature-file format for one clip's Mel-band matrix.
//!
//! Layout: magic `DFTR`, version u16 LE, T u32 LE, F u32 LE, then T*F values
//! as 32-bit IEEE-754 LE in row-major (time-major) order. Round-trips are
//! bit-exact; malformed files are rejected with the byte offset.

use crate::error::{data_err, Result};
use crate::numerics::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DFTR";
const FORMAT_VERSION: u16 = 1;

/// Serialize a `[T, F]` matrix.
pub fn feature_bytes(matrix: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = matrix.shape();
    if shape.len() != 2 {
        return crate::error::config_err(format!(
            "feature matrix must be rank 2 [T, F], got {shape:?}"
        ));
    }
    matrix.ensure_finite("feature matrix")?;
    let mut buf = Vec::with_capacity(14 + matrix.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(shape[1] as u32).to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parse a feature file from bytes; errors name the offending offset.
pub fn feature_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return data_err(format!(
            "bad feature magic at offset 0 (expected {MAGIC:?})"
        ));
    }
    if bytes.len() < 6 {
        return data_err("truncated feature file: version missing at offset 4".to_string());
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return data_err(format!(
            "unsupported feature format version {version} at offset 4"
        ));
    }
    if bytes.len() < 14 {
        return data_err(format!(
            "truncated feature file: header needs 14 bytes, got {}",
            bytes.len()
        ));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = 14 + t * f * 4;
    if bytes.len() != expected {
        return data_err(format!(
            "truncated feature file: {t}x{f} matrix needs {expected} bytes, got {} (values start at offset 14)",
            bytes.len()
        ));
    }
    let mut data = Vec::with_capacity(t * f);
    for i in 0..t * f {
        let off = 14 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let matrix = Tensor::new(vec![t, f], data)?;
    matrix.ensure_finite("feature file values")?;
    Ok(matrix)
}

pub fn write_feature_file(path: &Path, matrix: &Tensor<f32>) -> Result<()> {
    let bytes = feature_bytes(matrix)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| crate::error::Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    feature_from_bytes(&bytes).map_err(|e| match e {
        crate::error::Error::Data(msg) => {
            crate::error::Error::Data(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}
