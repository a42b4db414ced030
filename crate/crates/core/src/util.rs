use serde::Serialize;
use sha2::{Digest, Sha256};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a root seed and a key path.
pub fn derive_seed(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(root), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Canonical JSON (struct field order, no whitespace).
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config types serialize infallibly")
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let digest = Sha256::digest(canonical_json(value).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
