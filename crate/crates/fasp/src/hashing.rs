//! Content digests used for cache keys and output provenance.
//!
//! Everything hash-shaped in this crate is SHA-256 rendered as lowercase hex.
//! Inputs that cover several fields are joined with `\x1f` (unit separator)
//! so that field boundaries cannot collide with field content.

use sha2::{Digest, Sha256};

/// SHA-256 of raw bytes as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

/// SHA-256 over a sequence of parts, each preceded by its length, so
/// `["ab","c"]` and `["a","bc"]` digest differently.
pub fn sha256_hex_parts<I, B>(parts: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hex(&hasher.finalize())
}

/// First eight bytes of SHA-256(s), little-endian, as a u64. Used to derive
/// per-name RNG streams (e.g. one shuffle stream per prompt subgroup).
pub fn stream_id(s: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
