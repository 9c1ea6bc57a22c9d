//! Shared binary container: 8-byte magic, u32 version, u64 manifest length,
//! JSON manifest, then a little-endian f64 payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

pub(crate) fn encode<M: Serialize>(magic: &[u8; 8], manifest: &M, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode<M: DeserializeOwned>(
    origin: &Path,
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(M, Vec<f64>)> {
    let bad = |d: &str| Error::format(origin, d.to_string());
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len || !(body.len() - len).is_multiple_of(8) {
        return Err(bad("truncated payload"));
    }
    let manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| bad(&format!("manifest: {e}")))?;
    let payload = read_f64s(&body[len..]);
    Ok((manifest, payload))
}

pub(crate) fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
