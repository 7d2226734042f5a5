//! Shared hashing, MAC and seed-derivation primitives.
//!
//! Everything here is deterministic and versioned by construction: digests
//! and MACs feed signed payloads and persisted formats, so the exact byte
//! layouts must never drift between runs or platforms.

use hmac::{Hmac, KeyInit, Mac};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// 256-bit collision-resistant digest of `data`.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    let out = Sha256::digest(data);
    out.as_slice().try_into().expect("sha256 output is 32 bytes")
}

/// Digest over multiple parts, equivalent to hashing their concatenation.
pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().as_slice().try_into().expect("sha256 output is 32 bytes")
}

/// HMAC-SHA256 tag over `data` under `key`.
pub fn hmac_sha256(key: &[u8], data: &[&[u8]]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    for part in data {
        mac.update(part);
    }
    let out = mac.finalize().into_bytes();
    out.as_slice().try_into().expect("hmac output is 32 bytes")
}

/// Constant-time verification of an HMAC-SHA256 tag.
pub fn hmac_sha256_verify(key: &[u8], data: &[&[u8]], tag: &[u8; 32]) -> bool {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    for part in data {
        mac.update(part);
    }
    mac.verify_slice(tag).is_ok()
}

/// SplitMix64 step, the standard 64-bit finalizer/mixer.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes two 64-bit values into one; used to derive per-step and per-epoch
/// seeds from a base seed. Not cryptographic, but stable forever.
pub fn mix64(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Deterministic ChaCha20 RNG expanded from a 64-bit seed via SplitMix64.
///
/// The expansion is pinned here rather than relying on `SeedableRng::seed_from_u64`
/// so the stream survives dependency upgrades.
pub fn chacha_from_u64(seed: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}
