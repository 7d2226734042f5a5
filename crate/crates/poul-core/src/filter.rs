//! Deletable cuckoo filter over keyed fingerprints.
//!
//! The filter is the enclave-resident data digest: every committed data
//! point contributes one fingerprint `PRF(kid | data | eid [| owner])`
//! truncated to a configurable width, and deletion removes it again. Zero is
//! reserved as the empty-slot marker, so PRF outputs of zero remap to 1
//! (bias <= 2^-f).

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::crypto::{hmac_sha256, sha256, splitmix64};

/// Seed for hashing a fingerprint into its alternate-bucket offset.
const ALT_HASH_SEED: u64 = 0x504f_554c_2d41_4c54; // "POUL-ALT"
/// Seed for hashing a kid into its primary bucket.
const KID_HASH_SEED: u64 = 0x504f_554c_2d4b_4944; // "POUL-KID"

const SERIAL_MAGIC: &[u8; 4] = b"CKF1";

/// Keyed PRF key for fingerprint derivation; held by the enclave only.
#[derive(Clone)]
pub struct PrfKey(pub [u8; 16]);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("bucket count {0} is not a power of two")]
    BucketCountNotPowerOfTwo(usize),
    #[error("fingerprint bits {0} outside 1..=32")]
    BadFingerprintBits(u32),
    #[error("entries per bucket must be at least 1")]
    ZeroEntries,
    #[error("displacement limit reached; insertion failed")]
    Full,
    #[error("malformed filter serialization")]
    BadSerialization,
}

/// Filter geometry and displacement policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub bucket_count: usize,
    pub entries_per_bucket: usize,
    pub fingerprint_bits: u32,
    pub displacement_limit: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            bucket_count: 1 << 16,
            entries_per_bucket: 4,
            fingerprint_bits: 12,
            displacement_limit: 500,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !self.bucket_count.is_power_of_two() {
            return Err(FilterError::BucketCountNotPowerOfTwo(self.bucket_count));
        }
        if self.fingerprint_bits == 0 || self.fingerprint_bits > 32 {
            return Err(FilterError::BadFingerprintBits(self.fingerprint_bits));
        }
        if self.entries_per_bucket == 0 {
            return Err(FilterError::ZeroEntries);
        }
        Ok(())
    }

    /// Sizes the table for `n` items at high occupancy (~0.96 target load),
    /// the standard capacity-based sizing for cuckoo filters.
    pub fn for_capacity(n: usize, entries_per_bucket: usize, fingerprint_bits: u32) -> Self {
        let want = ((n as f64) / entries_per_bucket as f64 / 0.96).ceil().max(1.0) as usize;
        Self {
            bucket_count: want.next_power_of_two(),
            entries_per_bucket,
            fingerprint_bits,
            displacement_limit: 500,
        }
    }

    /// Bit-packed size of the bucket array in bytes: `buckets * entries * f / 8`
    /// (rounded up when not byte-aligned).
    pub fn payload_bytes(&self) -> usize {
        (self.bucket_count * self.entries_per_bucket * self.fingerprint_bits as usize + 7) / 8
    }

    fn fp_mask(&self) -> u32 {
        if self.fingerprint_bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.fingerprint_bits) - 1
        }
    }
}

/// Derives the keyed fingerprint of a data point: HMAC-SHA256 over
/// `kid | data | eid [| owner]` truncated to the configured width and
/// remapped away from zero. Always in `[1, 2^f - 1]`.
pub fn fingerprint(
    key: &PrfKey,
    config: &FilterConfig,
    kid: u64,
    data: &[u8],
    eid: &[u8; 32],
    owner: Option<u64>,
) -> u32 {
    let kid_bytes = kid.to_le_bytes();
    let owner_bytes = owner.map(|o| o.to_le_bytes());
    let mut parts: Vec<&[u8]> = vec![&kid_bytes, data, eid];
    if let Some(ref ob) = owner_bytes {
        parts.push(ob);
    }
    let tag = hmac_sha256(&key.0, &parts);
    let raw = u32::from_le_bytes(tag[0..4].try_into().unwrap());
    let fp = raw & config.fp_mask();
    if fp == 0 {
        1
    } else {
        fp
    }
}

/// Primary bucket hash for a kid.
pub fn kid_bucket_hash(kid: u64) -> u64 {
    xxh64(&kid.to_le_bytes(), KID_HASH_SEED)
}

/// Partial-key index pair: `i1 = h1 mod buckets`,
/// `i2 = i1 xor (Hash64(fp) mod buckets)`. The alternate of `(i2, fp)` is
/// `i1` again, which is what lets displacement move entries without the
/// original item.
pub fn index_pair(config: &FilterConfig, h1: u64, fp: u32) -> (usize, usize) {
    let mask = config.bucket_count - 1;
    let i1 = (h1 as usize) & mask;
    (i1, alt_index(config, i1, fp))
}

/// The other bucket an `(index, fp)` pair may live in.
pub fn alt_index(config: &FilterConfig, index: usize, fp: u32) -> usize {
    let mask = config.bucket_count - 1;
    let h = xxh64(&fp.to_le_bytes(), ALT_HASH_SEED) as usize;
    index ^ (h & mask)
}

/// Cuckoo filter with nonzero fingerprints and seeded eviction.
#[derive(Clone)]
pub struct CuckooFilter {
    config: FilterConfig,
    slots: Vec<u32>,
    item_count: usize,
    evict_seed: u64,
    evict_counter: u64,
}

impl CuckooFilter {
    /// `evict_seed` drives victim selection during displacement; reusing the
    /// same seed replays insert sequences deterministically.
    pub fn new(config: FilterConfig, evict_seed: u64) -> Result<Self, FilterError> {
        config.validate()?;
        Ok(Self {
            config,
            slots: vec![0u32; config.bucket_count * config.entries_per_bucket],
            item_count: 0,
            evict_seed,
            evict_counter: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn load_factor(&self) -> f64 {
        self.item_count as f64 / self.slots.len() as f64
    }

    fn bucket(&self, i: usize) -> &[u32] {
        let e = self.config.entries_per_bucket;
        &self.slots[i * e..(i + 1) * e]
    }

    fn bucket_mut(&mut self, i: usize) -> &mut [u32] {
        let e = self.config.entries_per_bucket;
        &mut self.slots[i * e..(i + 1) * e]
    }

    fn try_place(&mut self, i: usize, fp: u32) -> bool {
        for slot in self.bucket_mut(i) {
            if *slot == 0 {
                *slot = fp;
                return true;
            }
        }
        false
    }

    /// Inserts a fingerprint. On a full bucket pair, runs the seeded
    /// displacement chain up to the configured limit; failure means the
    /// caller must treat the commit as failed.
    pub fn insert(&mut self, fp: u32, h1: u64) -> Result<(), FilterError> {
        debug_assert!(fp != 0, "zero fingerprint is the empty marker");
        let (i1, i2) = index_pair(&self.config, h1, fp);
        if self.try_place(i1, fp) || self.try_place(i2, fp) {
            self.item_count += 1;
            return Ok(());
        }
        // Evict from a pseudorandomly chosen start bucket.
        self.evict_counter = self.evict_counter.wrapping_add(1);
        let mut rnd = splitmix64(self.evict_seed ^ self.evict_counter);
        let mut i = if rnd & 1 == 0 { i1 } else { i2 };
        let mut cur = fp;
        for _ in 0..self.config.displacement_limit {
            rnd = splitmix64(rnd);
            let victim = (rnd % self.config.entries_per_bucket as u64) as usize;
            let bucket = self.bucket_mut(i);
            std::mem::swap(&mut bucket[victim], &mut cur);
            i = alt_index(&self.config, i, cur);
            if self.try_place(i, cur) {
                self.item_count += 1;
                return Ok(());
            }
        }
        // Undo is intentionally skipped: the displaced chain still holds
        // every previously inserted fingerprint (the last evicted one ends up
        // homeless), so callers must abort the commit on this error.
        Err(FilterError::Full)
    }

    /// True iff `fp` is present in either bucket of `h1`. Never false for a
    /// live inserted item.
    pub fn query(&self, fp: u32, h1: u64) -> bool {
        let (i1, i2) = index_pair(&self.config, h1, fp);
        self.bucket(i1).contains(&fp) || (i2 != i1 && self.bucket(i2).contains(&fp))
    }

    /// Removes one matching slot if present; returns whether anything was
    /// removed.
    pub fn delete(&mut self, fp: u32, h1: u64) -> bool {
        let (i1, i2) = index_pair(&self.config, h1, fp);
        for i in [i1, i2] {
            for slot in self.bucket_mut(i) {
                if *slot == fp {
                    *slot = 0;
                    self.item_count -= 1;
                    return true;
                }
            }
            if i2 == i1 {
                break;
            }
        }
        false
    }

    /// Canonical serialization: `CKF1` magic, config header, item count,
    /// then the bucket array bit-packed at `fingerprint_bits` per slot
    /// (LSB-first within each byte). Carries no key material.
    pub fn serialize(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(4 + 8 + 4 + 4 + 8 + 8 + c.payload_bytes());
        out.extend_from_slice(SERIAL_MAGIC);
        out.extend_from_slice(&(c.bucket_count as u64).to_le_bytes());
        out.extend_from_slice(&(c.entries_per_bucket as u32).to_le_bytes());
        out.extend_from_slice(&c.fingerprint_bits.to_le_bytes());
        out.extend_from_slice(&(c.displacement_limit as u64).to_le_bytes());
        out.extend_from_slice(&(self.item_count as u64).to_le_bytes());
        let mut packed = vec![0u8; c.payload_bytes()];
        let f = c.fingerprint_bits as usize;
        for (slot_idx, &fp) in self.slots.iter().enumerate() {
            let bit_off = slot_idx * f;
            for b in 0..f {
                if (fp >> b) & 1 == 1 {
                    let pos = bit_off + b;
                    packed[pos / 8] |= 1 << (pos % 8);
                }
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    /// Rebuilds a filter from its canonical serialization. The result is
    /// queryable and mutable; `evict_seed` only matters if it will insert.
    pub fn deserialize(bytes: &[u8], evict_seed: u64) -> Result<Self, FilterError> {
        if bytes.len() < 4 + 8 + 4 + 4 + 8 + 8 || &bytes[0..4] != SERIAL_MAGIC {
            return Err(FilterError::BadSerialization);
        }
        let mut off = 4usize;
        fn read_u64(bytes: &[u8], off: &mut usize) -> u64 {
            let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        }
        fn read_u32(bytes: &[u8], off: &mut usize) -> u32 {
            let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
            *off += 4;
            v
        }
        let bucket_count = read_u64(bytes, &mut off) as usize;
        let entries = read_u32(bytes, &mut off) as usize;
        let fp_bits = read_u32(bytes, &mut off);
        let displacement_limit = read_u64(bytes, &mut off) as usize;
        let item_count = read_u64(bytes, &mut off) as usize;
        let config = FilterConfig {
            bucket_count,
            entries_per_bucket: entries,
            fingerprint_bits: fp_bits,
            displacement_limit,
        };
        config.validate().map_err(|_| FilterError::BadSerialization)?;
        let packed = &bytes[off..];
        if packed.len() != config.payload_bytes() {
            return Err(FilterError::BadSerialization);
        }
        let f = fp_bits as usize;
        let mut slots = vec![0u32; bucket_count * entries];
        for (slot_idx, slot) in slots.iter_mut().enumerate() {
            let bit_off = slot_idx * f;
            let mut v = 0u32;
            for b in 0..f {
                let pos = bit_off + b;
                if (packed[pos / 8] >> (pos % 8)) & 1 == 1 {
                    v |= 1 << b;
                }
            }
            *slot = v;
        }
        let real_count = slots.iter().filter(|s| **s != 0).count();
        if real_count != item_count {
            return Err(FilterError::BadSerialization);
        }
        Ok(Self { config, slots, item_count, evict_seed, evict_counter: 0 })
    }

    /// Collision-resistant digest of the canonical serialization; changes
    /// whenever any slot changes.
    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.serialize())
    }

    /// Displacement counter, persisted by the enclave's sealed state so an
    /// unsealed filter continues the same eviction stream.
    pub fn evict_counter(&self) -> u64 {
        self.evict_counter
    }

    pub fn set_evict_counter(&mut self, counter: u64) {
        self.evict_counter = counter;
    }
}
