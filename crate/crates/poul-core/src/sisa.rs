//! SISA pipeline: sharding, slicing, incremental training and the
//! retrain-from-scratch semantics that make deletion exact.
//!
//! A dataset is split into disjoint shards, each shard into ordered disjoint
//! slices. Within a shard the submodel chain is `m_i = train(m_{i-1},
//! slices 1..=i)`, so `m_i` depends only on the first `i` slices and the
//! seeds; deleting a point from slice `i` therefore requires retraining
//! exactly submodels `i..=s` and nothing else, and the result must equal a
//! fresh run over the surviving data bit-for-bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::crypto::{chacha_from_u64, mix64};
use crate::ml::{self, Hyperparams, MlError, ModelParams, Prediction, SampleSet};

/// Seed domain for deriving per-slice training streams from the base seed.
const STEP_SEED_TAG: u64 = 0x534c_4943_4553; // "SLICES"
/// Seed domain for the shard shuffle.
const SHARD_SEED_TAG: u64 = 0x5348_4152_44; // "SHARD"
/// Seed domain for the slice shuffle inside one shard.
const SLICE_SEED_TAG: u64 = 0x534c_4943; // "SLIC"

#[derive(Debug, Error)]
pub enum SisaError {
    #[error("cannot split {points} points into {parts} parts")]
    TooManyParts { points: usize, parts: usize },
    #[error("part count must be at least 1")]
    ZeroParts,
    #[error("unknown kid {0:#018x}")]
    UnknownKid(u64),
    #[error("malformed data record encoding")]
    BadRecordEncoding,
    #[error("no constituent models to aggregate")]
    NoModels,
    #[error(transparent)]
    Ml(#[from] MlError),
}

/// Whether an incremental step ran during initial learning or during a
/// post-deletion retrain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Learn,
    Unlearn,
}

/// Wall-clock record for one incremental step, consumed by the benchmark
/// harness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepTiming {
    pub shard: usize,
    pub slice: usize,
    pub kind: StepKind,
    pub samples: usize,
    pub train_us: u64,
    pub checkpoint_us: u64,
    pub restore_us: u64,
}

/// A labelled record plus its content-derived 64-bit identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub kid: u64,
    pub features: Vec<f32>,
    pub label: u32,
    pub owner: Option<u64>,
}

impl DataPoint {
    /// Single-owner constructor: `kid = xxh64(data)`.
    pub fn new(features: Vec<f32>, label: u32) -> Self {
        let kid = derive_kid(None, &base_bytes(&features, label));
        Self { kid, features, label, owner: None }
    }

    /// Multi-owner constructor: `kid = xxh64(owner | data)`, so identical
    /// data owned by two owners yields distinct kids.
    pub fn with_owner(owner: u64, features: Vec<f32>, label: u32) -> Self {
        let kid = derive_kid(Some(owner), &base_bytes(&features, label));
        Self { kid, features, label, owner: Some(owner) }
    }

    /// Canonical record bytes as stored in the data store:
    /// `label(u32) | features(f32 each) | owner marker`.
    pub fn record_bytes(&self) -> Vec<u8> {
        let mut out = base_bytes(&self.features, self.label);
        match self.owner {
            None => out.push(0u8),
            Some(o) => {
                out.push(1u8);
                out.extend_from_slice(&o.to_le_bytes());
            }
        }
        out
    }
}

/// Label-and-features encoding, the input to kid derivation.
pub fn base_bytes(features: &[f32], label: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + features.len() * 4);
    out.extend_from_slice(&label.to_le_bytes());
    for f in features {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

/// Content-derived identifier: `xxh64(data)` or `xxh64(owner | data)`.
pub fn derive_kid(owner: Option<u64>, base: &[u8]) -> u64 {
    match owner {
        None => xxh64(base, 0),
        Some(o) => {
            let mut buf = Vec::with_capacity(8 + base.len());
            buf.extend_from_slice(&o.to_le_bytes());
            buf.extend_from_slice(base);
            xxh64(&buf, 0)
        }
    }
}

/// Decodes canonical record bytes back into `(features, label, owner)`.
pub fn decode_record(bytes: &[u8], dim: usize) -> Result<(Vec<f32>, u32, Option<u64>), SisaError> {
    let base_len = 4 + dim * 4;
    if bytes.len() < base_len + 1 {
        return Err(SisaError::BadRecordEncoding);
    }
    let label = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let features: Vec<f32> = bytes[4..base_len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let owner = match bytes[base_len] {
        0 if bytes.len() == base_len + 1 => None,
        1 if bytes.len() == base_len + 9 => {
            Some(u64::from_le_bytes(bytes[base_len + 1..].try_into().unwrap()))
        }
        _ => return Err(SisaError::BadRecordEncoding),
    };
    Ok((features, label, owner))
}

/// Shard/slice assignment for a dataset: a seeded shuffle followed by
/// contiguous near-equal splits, so the partition is deterministic and
/// balanced to within one element at both levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_shards: usize,
    pub n_slices: usize,
    /// `slices[shard][slice]` holds dataset indices in training order.
    pub slices: Vec<Vec<Vec<u32>>>,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = chacha_from_u64(seed);
    use rand_chacha::rand_core::RngCore;
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at
/// most one (earlier chunks take the remainder).
pub fn near_equal_split<T: Clone>(items: &[T], parts: usize) -> Result<Vec<Vec<T>>, SisaError> {
    if parts == 0 {
        return Err(SisaError::ZeroParts);
    }
    if parts > items.len() {
        return Err(SisaError::TooManyParts { points: items.len(), parts });
    }
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut off = 0usize;
    for p in 0..parts {
        let take = base + usize::from(p < extra);
        out.push(items[off..off + take].to_vec());
        off += take;
    }
    Ok(out)
}

/// Partitions dataset indices into `n` disjoint shards.
pub fn shard(n_points: usize, n: usize, seed: u64) -> Result<Vec<Vec<u32>>, SisaError> {
    let order = shuffled_indices(n_points, mix64(seed, SHARD_SEED_TAG));
    near_equal_split(&order, n)
}

/// Slices one shard's indices into `s` ordered disjoint slices after a
/// seeded shuffle of the shard order.
pub fn slice(shard_indices: &[u32], s: usize, seed: u64) -> Result<Vec<Vec<u32>>, SisaError> {
    let order = shuffled_indices(shard_indices.len(), mix64(seed, SLICE_SEED_TAG));
    let reordered: Vec<u32> = order.iter().map(|&i| shard_indices[i as usize]).collect();
    near_equal_split(&reordered, s)
}

impl ShardPlan {
    pub fn build(
        n_points: usize,
        n_shards: usize,
        n_slices: usize,
        seed: u64,
    ) -> Result<Self, SisaError> {
        let shards = shard(n_points, n_shards, seed)?;
        let mut slices = Vec::with_capacity(n_shards);
        for (j, shard_indices) in shards.iter().enumerate() {
            slices.push(slice(shard_indices, n_slices, mix64(seed, j as u64))?);
        }
        Ok(Self { n_shards, n_slices, slices })
    }

    /// Locates a dataset index inside the plan: (shard, slice, position).
    pub fn locate_index(&self, dataset_index: u32) -> Option<(usize, usize, usize)> {
        for (j, shard_slices) in self.slices.iter().enumerate() {
            for (i, sl) in shard_slices.iter().enumerate() {
                if let Some(pos) = sl.iter().position(|&x| x == dataset_index) {
                    return Some((j, i, pos));
                }
            }
        }
        None
    }

    /// Per-slice point counts for one shard, in slice order.
    pub fn slice_counts(&self, shard: usize) -> Vec<usize> {
        self.slices[shard].iter().map(|s| s.len()).collect()
    }
}

/// Locates the shard and slice a kid belongs to and the indices of the
/// submodels it influences (`slice..n_slices`, the grey-submodel rule).
pub fn locate_affected(
    plan: &ShardPlan,
    points: &[DataPoint],
    kid: u64,
) -> Result<(usize, usize, Vec<usize>), SisaError> {
    let dataset_index = points
        .iter()
        .position(|p| p.kid == kid)
        .ok_or(SisaError::UnknownKid(kid))? as u32;
    let (shard_idx, slice_idx, _) =
        plan.locate_index(dataset_index).ok_or(SisaError::UnknownKid(kid))?;
    Ok((shard_idx, slice_idx, (slice_idx..plan.n_slices).collect()))
}

/// Per-slice training seed: every incremental step gets its own shuffle
/// stream derived from the base seed, shared by the enclave trainer and the
/// retrain oracle.
pub fn step_seed(base_seed: u64, slice_index: usize) -> u64 {
    mix64(base_seed, STEP_SEED_TAG ^ (slice_index as u64).wrapping_mul(0x9E37_79B9))
}

/// Hyperparams for the incremental step that produces submodel `slice + 1`.
pub fn step_hyperparams(hp: &Hyperparams, slice_index: usize) -> Hyperparams {
    Hyperparams { rng_seed: step_seed(hp.rng_seed, slice_index), ..*hp }
}

/// Trains the submodel chain for one shard from scratch: `m_1 =
/// train(m0, d_1)`, `m_i = train(m_{i-1}, d_1..d_i)`, with `hp.epochs`
/// over the cumulative data at each step.
///
/// `slice_orders[i]` lists sample indices (into `set`) of slice `i+1` in
/// training order; deleted points are simply absent. This function is the
/// retrain-from-scratch oracle for exact unlearning: the enclave path must
/// produce bit-identical chains.
pub fn incremental_chain(
    m0: &ModelParams,
    set: &SampleSet,
    slice_orders: &[Vec<u32>],
    hp: &Hyperparams,
) -> Result<Vec<ModelParams>, SisaError> {
    let mut chain = Vec::with_capacity(slice_orders.len());
    let mut prev = m0.clone();
    let mut cumulative: Vec<u32> = Vec::new();
    for (i, slice) in slice_orders.iter().enumerate() {
        cumulative.extend_from_slice(slice);
        let mut m = ml::train_sgd(&prev, set, &cumulative, &step_hyperparams(hp, i))?;
        m.slice_index = (i + 1) as u64;
        chain.push(m.clone());
        prev = m;
    }
    Ok(chain)
}

/// Mean-of-scores aggregation over constituent models with lowest-index
/// tie-break, permutation-invariant over shards up to float associativity
/// (scores are summed in shard order).
pub fn aggregate_predict(models: &[&ModelParams], input: &[f32]) -> Result<Prediction, SisaError> {
    if models.is_empty() {
        return Err(SisaError::NoModels);
    }
    let classes = models[0].dims.classes;
    let mut scores = vec![0.0f32; classes];
    for m in models {
        let p = ml::predict(m, input)?;
        for (acc, s) in scores.iter_mut().zip(p.scores.iter()) {
            *acc += *s;
        }
    }
    let inv = 1.0 / models.len() as f32;
    for s in scores.iter_mut() {
        *s *= inv;
    }
    let mut label = 0usize;
    for k in 1..classes {
        if scores[k] > scores[label] {
            label = k;
        }
    }
    Ok(Prediction { scores, label })
}

/// Builds a [`SampleSet`] slab from points, preserving order.
pub fn sample_set_of(points: &[DataPoint], dim: usize) -> SampleSet {
    let mut set = SampleSet::with_capacity(dim, points.len());
    for p in points {
        set.push(&p.features, p.label);
    }
    set
}
