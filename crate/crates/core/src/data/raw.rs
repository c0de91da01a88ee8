//! `SST1` raw tensors: magic, `u32` LE `H, W, C`, then `H·W·C` LE `f32`
//! values in row-major `(H, W, C)` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

pub const RAW_MAGIC: [u8; 4] = *b"SST1";
const HEADER_LEN: usize = 16;

/// Encodes a map, narrowing values to `f32`.
pub fn encode_raw<T: Scalar>(map: &FeatureMap<T>) -> Vec<u8> {
    let (h, w, c) = map.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.data().len());
    out.extend_from_slice(&RAW_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it together
/// with the number of bytes consumed.
pub fn decode_raw_prefix(bytes: &[u8]) -> Result<(FeatureMap<f32>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("raw tensor magic"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != RAW_MAGIC {
        return Err(Error::BadMagic {
            expected: RAW_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("raw tensor header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::invalid("raw tensor dimensions overflow"))?;
    let end = count
        .checked_mul(4)
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::invalid("raw tensor dimensions overflow"))?;
    if bytes.len() < end {
        return Err(Error::Truncated("raw tensor payload"));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((FeatureMap::new(h, w, c, data)?, end))
}

/// Decodes a whole buffer; trailing bytes are an error.
pub fn decode_raw(bytes: &[u8]) -> Result<FeatureMap<f32>> {
    let (map, used) = decode_raw_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::invalid(format!("{} trailing bytes after raw tensor", bytes.len() - used)));
    }
    Ok(map)
}

pub fn read_raw(path: &Path) -> Result<FeatureMap<f32>> {
    let bytes = std::fs::read(path)?;
    decode_raw(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_raw<T: Scalar>(path: &Path, map: &FeatureMap<T>) -> Result<()> {
    std::fs::write(path, encode_raw(map))?;
    Ok(())
}
