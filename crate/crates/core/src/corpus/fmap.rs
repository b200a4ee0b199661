//! The FMAP container: a 20-byte little-endian header followed by
//! `H·W·C` IEEE-754 `f32` values in `(y, x, c)` order.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FMAP"
//! 4       2     version (u16) = 1
//! 6       2     reserved (u16) = 0
//! 8       4     H (u32)
//! 12      4     W (u32)
//! 16      4     C (u32)
//! 20      ..    payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AnomalyMap, FeatureMap};

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode(map: &FeatureMap) -> Result<Vec<u8>> {
    encode_raw(map.height(), map.width(), map.channels(), map.data())
}

pub fn encode_anomaly(map: &AnomalyMap) -> Result<Vec<u8>> {
    encode_raw(map.height(), map.width(), 1, map.scores())
}

fn encode_raw(h: usize, w: usize, c: usize, data: &[f64]) -> Result<Vec<u8>> {
    let dim = |v: usize, name: &str| {
        u32::try_from(v).map_err(|_| Error::param(format!("{name} = {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&dim(h, "height")?.to_le_bytes());
    out.extend_from_slice(&dim(w, "width")?.to_le_bytes());
    out.extend_from_slice(&dim(c, "channels")?.to_le_bytes());
    for &v in data {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Numeric(format!("value {v} not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parse an FMAP byte buffer. Errors carry the offending byte offset.
pub fn decode(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FMAP\""));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    if u16_at(6) != 0 {
        return Err(Error::format(6, "reserved field must be zero"));
    }
    let (h, w, c) = (u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64);
    for (v, off) in [(h, 8u64), (w, 12), (c, 16)] {
        if v == 0 {
            return Err(Error::format(off, "zero dimension"));
        }
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64))
        .ok_or_else(|| Error::format(8, "dimension overflow"))?;
    let payload = (bytes.len() - HEADER_LEN) as u64;
    if payload != count * 4 {
        return Err(Error::format(
            HEADER_LEN as u64 + payload.min(count * 4),
            format!("payload is {payload} bytes, header declares {}", count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format(
                (HEADER_LEN + 4 * i) as u64,
                "non-finite value in payload",
            ));
        }
        data.push(v as f64);
    }
    FeatureMap::new(h as usize, w as usize, c as usize, data)
}

pub fn load(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save(map: &FeatureMap, path: &Path) -> Result<()> {
    write_bytes(path, &encode(map)?)
}

pub fn save_anomaly(map: &AnomalyMap, path: &Path) -> Result<()> {
    write_bytes(path, &encode_anomaly(map)?)
}

/// Load a single-channel FMAP as an anomaly map.
pub fn load_anomaly(path: &Path) -> Result<AnomalyMap> {
    let m = load(path)?;
    if m.channels() != 1 {
        return Err(Error::format(16, format!("expected C=1, found C={}", m.channels())));
    }
    AnomalyMap::new(m.height(), m.width(), m.into_data())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
