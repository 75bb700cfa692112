//! ADTF v1 field files.
//!
//! One UTF-8 JSON header line
//! `{"magic":"ADTF","version":1,"height":H,"width":W,"classes":K,"spacing":h}`
//! followed by `H·W·K` little-endian `f32` values in row-major pixel order with
//! the class index innermost.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid2D, SimplexField};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &str = "ADTF";
pub const VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u64,
    height: usize,
    width: usize,
    classes: usize,
    spacing: f64,
}

/// Encodes a `K × H × W` tensor. Values are narrowed to `f32`.
pub fn encode(values: &Tensor, spacing: f64) -> Vec<u8> {
    let shape = values.shape();
    let header = Header {
        magic: MAGIC.to_string(),
        version: VERSION,
        height: shape.height,
        width: shape.width,
        classes: shape.channels,
        spacing,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    let n = shape.plane_len();
    let data = values.data();
    out.reserve(shape.len() * 4);
    for i in 0..n {
        for c in 0..shape.channels {
            out.extend_from_slice(&(data[c * n + i] as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes an ADTF buffer into a tensor and its grid spacing. `path` is only
/// used to label errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Tensor, f64)> {
    let header_err = |msg: String| Error::Header {
        path: path.to_path_buf(),
        msg,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("missing header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..newline])
        .map_err(|e| header_err(format!("header is not UTF-8: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| header_err(e.to_string()))?;
    if value.get("magic").and_then(|m| m.as_str()) != Some(MAGIC) {
        return Err(header_err("bad magic".into()));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| header_err("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| header_err(e.to_string()))?;
    if header.height == 0 || header.width == 0 || header.classes == 0 {
        return Err(header_err("zero extent".into()));
    }
    let shape = Shape::new(header.classes, header.height, header.width);
    let payload = &bytes[newline + 1..];
    let expected = shape.len() * 4;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let n = shape.plane_len();
    let mut data = vec![0.0; shape.len()];
    for (j, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        let (i, c) = (j / shape.channels, j % shape.channels);
        data[c * n + i] = f64::from(v);
    }
    Ok((Tensor::from_vec(shape, data), header.spacing))
}

pub fn write_tensor(path: &Path, values: &Tensor, spacing: f64) -> Result<()> {
    let bytes = encode(values, spacing);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, f64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_field(path: &Path, field: &SimplexField) -> Result<()> {
    write_tensor(path, field.values(), field.grid().spacing)
}

/// Reads a field file and checks the simplex invariants.
pub fn read_field(path: &Path) -> Result<SimplexField> {
    let (values, spacing) = read_tensor(path)?;
    let shape = values.shape();
    let grid = Grid2D::new(shape.height, shape.width, spacing)?;
    SimplexField::new(grid, values)
}

/// Rounds every entry to the nearest `f32`, the precision ADTF stores.
pub fn quantize(values: &Tensor) -> Tensor {
    values.map(|v| f64::from(v as f32))
}
