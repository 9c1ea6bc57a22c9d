//! Content hashes for provenance tags and derived RNG seeds.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

fn digest<T: Serialize + ?Sized>(value: &T) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json).into())
}

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let d = digest(value)?;
    Ok(d[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// A 64-bit seed derived from the value's JSON encoding.
pub fn seed_of<T: Serialize + ?Sized>(value: &T) -> Result<u64> {
    let d = digest(value)?;
    Ok(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&("x", 1)).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, config_hash(&("x", 1)).unwrap());
        assert_ne!(a, config_hash(&("x", 2)).unwrap());
    }
}
