//! Float raster files: 16-byte header (`BEFD`, record type 1, height,
//! width; little-endian u32) followed by row-major little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Field;

pub const MAGIC: &[u8; 4] = b"BEFD";
pub const RECORD_RASTER: u32 = 1;
pub const RECORD_CHECKPOINT: u32 = 2;

pub fn encode_raster(field: &Field<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&RECORD_RASTER.to_le_bytes());
    out.extend_from_slice(&(field.height() as u32).to_le_bytes());
    out.extend_from_slice(&(field.width() as u32).to_le_bytes());
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

pub fn decode_raster(bytes: &[u8]) -> Result<Field<f32>> {
    let fail = |offset, msg: &str| Err(Error::Parse { offset, msg: msg.into() });
    if bytes.len() < 16 {
        return fail(bytes.len(), "raster header is 16 bytes");
    }
    if &bytes[..4] != MAGIC {
        return fail(0, "bad magic");
    }
    if u32_at(bytes, 4) != RECORD_RASTER {
        return fail(4, "not a float raster record");
    }
    let h = u32_at(bytes, 8) as usize;
    let w = u32_at(bytes, 12) as usize;
    if bytes.len() != 16 + 4 * h * w {
        return fail(bytes.len(), &format!("payload of {h}x{w} raster must be {} bytes", 4 * h * w));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Field::from_vec(h, w, data)
}

/// True when `bytes` starts like a float raster.
pub fn is_raster(bytes: &[u8]) -> bool {
    bytes.len() >= 8 && &bytes[..4] == MAGIC && u32_at(bytes, 4) == RECORD_RASTER
}

pub fn write_raster(field: &Field<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raster(field)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Field<f32>> {
    let path = path.as_ref();
    decode_raster(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Min-max scaling to 8 bits. A constant field maps to 255 everywhere.
pub fn visualize(field: &Field<f64>) -> Field<u8> {
    let (lo, hi) = field
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return field.map(|_| 255);
    }
    field.map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
}
