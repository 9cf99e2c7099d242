//! Content hashes used for cache keys, job ids and seeds.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Hash of the compact JSON form of `value`. Struct fields serialize in
/// declaration order, so this is stable for a fixed type.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// Derives a child seed from a parent seed and an index.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&parent.to_le_bytes());
    buf[8..].copy_from_slice(&index.to_le_bytes());
    let digest = sha256(&buf);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
