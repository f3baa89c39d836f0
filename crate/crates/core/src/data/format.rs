//! TESF (features), TESL (labels) and class-name files.
//!
//! ```text
//! TESF: "TESF" | version u32 | n u64 | d u64 | n·d f32, row-major
//! TESL: "TESL" | version u32 | n u64 | C u64 | n u32 labels
//! ```
//! All integers and floats little-endian. Class names: UTF-8, one per line.

use std::fs;
use std::path::Path;

use crate::ndcore::Matrix;
use crate::Scalar;

use super::{DataError, DataResult};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

fn header(magic: &[u8; 4], n: usize, second: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(second as u64).to_le_bytes());
    out
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> DataError {
    DataError::Format { path: path.display().to_string(), offset, message: message.into() }
}

/// Validates magic, version and payload length (`words(n, second)` 4-byte
/// values); returns `(n, second)`.
fn parse_header(
    bytes: &[u8],
    magic: &[u8; 4],
    words: impl Fn(u64, u64) -> Option<u64>,
    path: &Path,
) -> DataResult<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[0..4] != magic {
        return Err(format_err(path, 0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let second = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = words(n, second)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| format_err(path, 8, "header sizes overflow"))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(format_err(path, bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if actual > expected {
        return Err(format_err(path, expected as usize, "trailing bytes after payload"));
    }
    Ok((n as usize, second as usize))
}

pub fn encode_features<T: Scalar>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = header(b"TESF", m.rows(), m.cols());
    out.reserve(m.as_slice().len() * 4);
    for v in m.as_slice() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_features<T: Scalar>(bytes: &[u8], path: &Path) -> DataResult<Matrix<T>> {
    let (n, d) = parse_header(bytes, b"TESF", u64::checked_mul, path)?;
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(path, HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(T::of(v as f64));
    }
    Ok(Matrix::from_vec(n, d, data)?)
}

pub fn write_feature_matrix<T: Scalar>(path: &Path, m: &Matrix<T>) -> DataResult<()> {
    fs::write(path, encode_features(m)).map_err(|e| DataError::io(path, e))
}

pub fn read_feature_matrix<T: Scalar>(path: &Path) -> DataResult<Matrix<T>> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn encode_labels(labels: &[usize], classes: usize) -> DataResult<Vec<u8>> {
    let mut out = header(b"TESL", labels.len(), classes);
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(DataError::Label { index, label, classes });
        }
        let v = u32::try_from(label).map_err(|_| DataError::Label { index, label, classes })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(labels, classes)`.
pub fn decode_labels(bytes: &[u8], path: &Path) -> DataResult<(Vec<usize>, usize)> {
    let (n, classes) = parse_header(bytes, b"TESL", |n, _| Some(n), path)?;
    let mut labels = Vec::with_capacity(n);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let label = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
        if label >= classes {
            return Err(format_err(path, HEADER_LEN + 4 * i, format!("label {label} >= {classes} classes")));
        }
        labels.push(label);
    }
    Ok((labels, classes))
}

pub fn write_labels(path: &Path, labels: &[usize], classes: usize) -> DataResult<()> {
    fs::write(path, encode_labels(labels, classes)?).map_err(|e| DataError::io(path, e))
}

pub fn read_labels(path: &Path) -> DataResult<(Vec<usize>, usize)> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_labels(&bytes, path)
}

pub fn write_class_names(path: &Path, names: &[String]) -> DataResult<()> {
    let mut text = String::new();
    for (i, name) in names.iter().enumerate() {
        if name.contains(['\n', '\r']) {
            return Err(DataError::Invalid(format!("class name {i} contains a line break")));
        }
        text.push_str(name);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn read_class_names(path: &Path) -> DataResult<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| format_err(path, e.utf8_error().valid_up_to(), "class names are not valid UTF-8"))?;
    Ok(text.lines().map(str::to_owned).collect())
}
