//! Authenticated lineage layer.
//!
//! Two untrusted out-of-enclave stores (`DataStore`, `ModelLinkStore`) hold
//! the bulky payloads; the compact in-enclave `ShardLineage` (key list plus
//! slice bookkeeping) ties every data point to the submodels it influences
//! and carries the secrets that make tampering detectable:
//!
//! * each data record is bound by `dmac = HMAC(mac_key, kid | data)` and by
//!   its fingerprint in the enclave filter;
//! * each submodel record is bound by `m_s_mac = H(model | seed)` where the
//!   seed is fresh per store and never leaves the enclave, which defeats
//!   rollback and relocation of checkpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::crypto::{hmac_sha256, hmac_sha256_verify, sha256, sha256_parts};
use crate::filter::{fingerprint, kid_bucket_hash, CuckooFilter, FilterError, PrfKey};

/// Enclave-internal MAC key for data-record integrity.
#[derive(Clone)]
pub struct MacKey(pub [u8; 32]);

/// Packed key-entry length: kid(8) tag(1) data_link(8) model_link(8) seed(8)
/// reserved(19), matching the measured 416-bit entry.
pub const KEY_ENTRY_LEN: usize = 52;

/// Sentinel encoding a null link/seed in the packed layout.
const NULL_FIELD: u64 = u64::MAX;

const DATA_STORE_MAGIC: &[u8; 4] = b"PDST";
const MODEL_STORE_MAGIC: &[u8; 4] = b"PMLK";

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("kid {0:#018x} already live")]
    DuplicateKid(u64),
    #[error("unknown kid {0:#018x}")]
    UnknownKid(u64),
    #[error("data for kid {0:#018x} was deleted")]
    DeletedData(u64),
    #[error("data record MAC mismatch for kid {0:#018x} (replacing attack)")]
    ReplacingAttack(u64),
    #[error("filter rejects kid {0:#018x} (deleted or forged record)")]
    DeletedOrForged(u64),
    #[error("submodel MAC mismatch at slice {0} (rollback or relocation attack)")]
    RollbackOrRelocationAttack(usize),
    #[error("submodel at slice {0} is invalidated")]
    InvalidatedSubmodel(usize),
    #[error("kid {0:?} is not slice-final for slice {1}")]
    NotSliceFinal(Option<u64>, usize),
    #[error("slice index {0} out of range")]
    BadSliceIndex(usize),
    #[error("no live data before slice {0}; cannot anchor a submodel")]
    EmptyPrefix(usize),
    #[error("store handle {0} out of range")]
    BadHandle(u64),
    #[error("shard is full: all declared slices already populated")]
    ShardFull,
    #[error("filter error: {0}")]
    Filter(#[from] FilterError),
    #[error("store file is malformed")]
    BadStoreFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-data-point lineage record.
///
/// `model_link`/`seed` are only set on the entry that anchors a slice's
/// submodel (normally the last live data point of the slice). Nulls encode
/// as `u64::MAX` in the packed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyEntry {
    pub kid: u64,
    pub tag: bool,
    pub data_link: Option<u64>,
    pub model_link: Option<u64>,
    pub seed: Option<u64>,
}

impl KeyEntry {
    pub fn pack(&self) -> [u8; KEY_ENTRY_LEN] {
        let mut out = [0u8; KEY_ENTRY_LEN];
        out[0..8].copy_from_slice(&self.kid.to_le_bytes());
        out[8] = self.tag as u8;
        out[9..17].copy_from_slice(&self.data_link.unwrap_or(NULL_FIELD).to_le_bytes());
        out[17..25].copy_from_slice(&self.model_link.unwrap_or(NULL_FIELD).to_le_bytes());
        out[25..33].copy_from_slice(&self.seed.unwrap_or(NULL_FIELD).to_le_bytes());
        out
    }

    pub fn unpack(bytes: &[u8; KEY_ENTRY_LEN]) -> Self {
        let field = |range: std::ops::Range<usize>| -> Option<u64> {
            let v = u64::from_le_bytes(bytes[range].try_into().unwrap());
            (v != NULL_FIELD).then_some(v)
        };
        Self {
            kid: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
            tag: bytes[8] != 0,
            data_link: field(9..17),
            model_link: field(17..25),
            seed: field(25..33),
        }
    }
}

/// Data-point record as stored out of the enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRecord {
    pub kid: u64,
    pub data: Vec<u8>,
    pub dmac: [u8; 32],
}

impl DataRecord {
    pub fn encoded_len(&self) -> usize {
        8 + 8 + self.data.len() + 32
    }
}

/// Submodel record as stored out of the enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRecord {
    pub slice_index: u64,
    pub model: Vec<u8>,
    pub m_s_mac: [u8; 32],
}

impl ModelRecord {
    pub fn encoded_len(&self) -> usize {
        8 + 8 + self.model.len() + 32
    }
}

/// Freshness MAC binding a submodel to its enclave-held seed.
pub fn submodel_mac(model: &[u8], seed: u64) -> [u8; 32] {
    sha256_parts(&[model, &seed.to_le_bytes()])
}

/// Data-record MAC under the enclave MAC key.
pub fn data_mac(mac_key: &MacKey, kid: u64, data: &[u8]) -> [u8; 32] {
    hmac_sha256(&mac_key.0, &[&kid.to_le_bytes(), data])
}

/// Append-only out-of-enclave store of MAC'd data records.
///
/// The records are public and writable by the (untrusted) server; integrity
/// comes from the checks performed inside the enclave, never from this type.
#[derive(Debug, Clone, Default)]
pub struct DataStore {
    pub records: Vec<DataRecord>,
}

impl DataStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: DataRecord) -> u64 {
        self.records.push(record);
        (self.records.len() - 1) as u64
    }

    pub fn get(&self, handle: u64) -> Result<&DataRecord, AuthError> {
        self.records.get(handle as usize).ok_or(AuthError::BadHandle(handle))
    }

    pub fn get_mut(&mut self, handle: u64) -> Result<&mut DataRecord, AuthError> {
        self.records.get_mut(handle as usize).ok_or(AuthError::BadHandle(handle))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn payload_bytes(&self) -> usize {
        self.records.iter().map(|r| r.encoded_len()).sum()
    }

    /// Length-prefixed little-endian record file.
    pub fn save(&self, path: &Path) -> Result<(), AuthError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DATA_STORE_MAGIC)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.kid.to_le_bytes())?;
            w.write_all(&(r.data.len() as u64).to_le_bytes())?;
            w.write_all(&r.data)?;
            w.write_all(&r.dmac)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AuthError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATA_STORE_MAGIC {
            return Err(AuthError::BadStoreFile);
        }
        let count = read_u64(&mut r)?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let kid = read_u64(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let mut data = vec![0u8; len];
            r.read_exact(&mut data)?;
            let mut dmac = [0u8; 32];
            r.read_exact(&mut dmac)?;
            records.push(DataRecord { kid, data, dmac });
        }
        Ok(Self { records })
    }
}

/// Append-only out-of-enclave store of submodel records. Superseded records
/// remain as tombstones; liveness is defined by the in-enclave links.
#[derive(Debug, Clone, Default)]
pub struct ModelLinkStore {
    pub records: Vec<ModelRecord>,
}

impl ModelLinkStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: ModelRecord) -> u64 {
        self.records.push(record);
        (self.records.len() - 1) as u64
    }

    pub fn get(&self, handle: u64) -> Result<&ModelRecord, AuthError> {
        self.records.get(handle as usize).ok_or(AuthError::BadHandle(handle))
    }

    pub fn get_mut(&mut self, handle: u64) -> Result<&mut ModelRecord, AuthError> {
        self.records.get_mut(handle as usize).ok_or(AuthError::BadHandle(handle))
    }

    pub fn save(&self, path: &Path) -> Result<(), AuthError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_STORE_MAGIC)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.slice_index.to_le_bytes())?;
            w.write_all(&(r.model.len() as u64).to_le_bytes())?;
            w.write_all(&r.model)?;
            w.write_all(&r.m_s_mac)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AuthError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_STORE_MAGIC {
            return Err(AuthError::BadStoreFile);
        }
        let count = read_u64(&mut r)?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let slice_index = read_u64(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let mut model = vec![0u8; len];
            r.read_exact(&mut model)?;
            let mut m_s_mac = [0u8; 32];
            r.read_exact(&mut m_s_mac)?;
            records.push(ModelRecord { slice_index, model, m_s_mac });
        }
        Ok(Self { records })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64, AuthError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// In-enclave lineage for one shard: the ordered key list, slice boundaries,
/// and the per-slice submodel anchors.
///
/// Entry order is commit order, which is slice order; `slice_ends[i]` is the
/// number of entries in slices `0..=i`. Entries are never removed, only
/// tombstoned via `tag = 0`.
pub struct ShardLineage {
    entries: Vec<KeyEntry>,
    owners: Vec<Option<u64>>,
    kid_index: HashMap<u64, usize>,
    slice_ends: Vec<usize>,
    /// Per-slice (record handle, seed, owner entry) for the current chain.
    slice_models: Vec<Option<SliceModel>>,
}

#[derive(Debug, Clone, Copy)]
struct SliceModel {
    handle: u64,
    seed: u64,
    owner_entry: Option<usize>,
}

impl ShardLineage {
    /// `slice_counts[i]` is the number of data points slice `i` will commit.
    pub fn new(slice_counts: &[usize]) -> Self {
        let mut slice_ends = Vec::with_capacity(slice_counts.len());
        let mut acc = 0usize;
        for c in slice_counts {
            acc += c;
            slice_ends.push(acc);
        }
        Self {
            entries: Vec::with_capacity(acc),
            owners: Vec::with_capacity(acc),
            kid_index: HashMap::with_capacity(acc),
            slice_ends,
            slice_models: vec![None; slice_counts.len()],
        }
    }

    pub fn n_slices(&self) -> usize {
        self.slice_ends.len()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[KeyEntry] {
        &self.entries
    }

    pub fn entry_of(&self, kid: u64) -> Option<&KeyEntry> {
        self.kid_index.get(&kid).map(|&i| &self.entries[i])
    }

    pub fn owner_of(&self, kid: u64) -> Option<Option<u64>> {
        self.kid_index.get(&kid).map(|&i| self.owners[i])
    }

    /// Which slice the entry at `idx` belongs to.
    fn slice_of_entry(&self, idx: usize) -> usize {
        self.slice_ends.partition_point(|&end| end <= idx)
    }

    /// (slice index, position within slice) for a committed kid.
    pub fn locate(&self, kid: u64) -> Result<(usize, usize), AuthError> {
        let &idx = self.kid_index.get(&kid).ok_or(AuthError::UnknownKid(kid))?;
        let slice = self.slice_of_entry(idx);
        let start = if slice == 0 { 0 } else { self.slice_ends[slice - 1] };
        Ok((slice, idx - start))
    }

    /// Serialized key list: packed 52-byte entries in order.
    pub fn packed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * KEY_ENTRY_LEN);
        for e in &self.entries {
            out.extend_from_slice(&e.pack());
        }
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.packed_bytes())
    }

    /// Links a new data point: appends the MAC'd record to the data store,
    /// inserts its fingerprint into the filter, and creates the live key
    /// entry. Fails on a duplicate live kid or a full filter (the commit
    /// must then be treated as failed).
    #[allow(clippy::too_many_arguments)]
    pub fn append_data(
        &mut self,
        store: &mut DataStore,
        filter: &mut CuckooFilter,
        mac_key: &MacKey,
        prf_key: &PrfKey,
        eid: &[u8; 32],
        kid: u64,
        owner: Option<u64>,
        data: &[u8],
    ) -> Result<u64, AuthError> {
        if let Some(&idx) = self.kid_index.get(&kid) {
            if self.entries[idx].tag {
                return Err(AuthError::DuplicateKid(kid));
            }
            // A tombstoned kid stays dead; recommitting it is also rejected
            // to keep the entry order immutable.
            return Err(AuthError::DuplicateKid(kid));
        }
        if self.entries.len() >= self.slice_ends.last().copied().unwrap_or(0) {
            return Err(AuthError::ShardFull);
        }
        let fp = fingerprint(prf_key, filter.config(), kid, data, eid, owner);
        filter.insert(fp, kid_bucket_hash(kid))?;
        let dmac = data_mac(mac_key, kid, data);
        let handle = store.append(DataRecord { kid, data: data.to_vec(), dmac });
        let entry = KeyEntry {
            kid,
            tag: true,
            data_link: Some(handle),
            model_link: None,
            seed: None,
        };
        self.entries.push(entry);
        self.owners.push(owner);
        self.kid_index.insert(kid, self.entries.len() - 1);
        Ok(handle)
    }

    /// Fetches a committed data point's bytes, accepting only if the record
    /// MAC verifies and the fingerprint still queries true in the filter.
    pub fn fetch_data_checked(
        &self,
        store: &DataStore,
        filter: &CuckooFilter,
        mac_key: &MacKey,
        prf_key: &PrfKey,
        eid: &[u8; 32],
        kid: u64,
    ) -> Result<Vec<u8>, AuthError> {
        let &idx = self.kid_index.get(&kid).ok_or(AuthError::UnknownKid(kid))?;
        let entry = &self.entries[idx];
        if !entry.tag {
            return Err(AuthError::DeletedData(kid));
        }
        let handle = entry.data_link.ok_or(AuthError::DeletedData(kid))?;
        let record = store.get(handle)?;
        if record.kid != kid
            || !hmac_sha256_verify(&mac_key.0, &[&kid.to_le_bytes(), &record.data], &record.dmac)
        {
            return Err(AuthError::ReplacingAttack(kid));
        }
        let fp = fingerprint(prf_key, filter.config(), kid, &record.data, eid, self.owners[idx]);
        if !filter.query(fp, kid_bucket_hash(kid)) {
            return Err(AuthError::DeletedOrForged(kid));
        }
        Ok(record.data.clone())
    }

    /// The kid expected to anchor slice `i`'s submodel: the last live entry
    /// at or before the end of the slice. `None` when everything up to the
    /// slice end is deleted.
    pub fn expected_anchor(&self, slice: usize) -> Result<Option<u64>, AuthError> {
        if slice >= self.n_slices() {
            return Err(AuthError::BadSliceIndex(slice));
        }
        let end = self.slice_ends[slice].min(self.entries.len());
        Ok(self.entries[..end].iter().rev().find(|e| e.tag).map(|e| e.kid))
    }

    /// Stores a freshly trained submodel for `slice`: writes the record with
    /// `m_s_mac = H(model | seed)` to the model store and anchors the link
    /// and seed on the slice-final key entry. The caller names the anchor
    /// kid it believes is slice-final; a mismatch is rejected.
    pub fn store_submodel(
        &mut self,
        models: &mut ModelLinkStore,
        slice: usize,
        model_bytes: &[u8],
        seed: u64,
        anchor_kid: Option<u64>,
    ) -> Result<u64, AuthError> {
        let expected = self.expected_anchor(slice)?;
        if anchor_kid != expected {
            return Err(AuthError::NotSliceFinal(anchor_kid, slice));
        }
        let mac = submodel_mac(model_bytes, seed);
        let handle = models.append(ModelRecord {
            slice_index: slice as u64,
            model: model_bytes.to_vec(),
            m_s_mac: mac,
        });
        let owner_entry = expected.map(|kid| self.kid_index[&kid]);
        if let Some(idx) = owner_entry {
            self.entries[idx].model_link = Some(handle);
            self.entries[idx].seed = Some(seed);
        }
        self.slice_models[slice] = Some(SliceModel { handle, seed, owner_entry });
        Ok(handle)
    }

    /// Restores slice `i`'s submodel, halting unless
    /// `H(stored bytes | seed)` matches the stored MAC.
    pub fn restore_submodel_checked(
        &self,
        models: &ModelLinkStore,
        slice: usize,
    ) -> Result<Vec<u8>, AuthError> {
        if slice >= self.n_slices() {
            return Err(AuthError::BadSliceIndex(slice));
        }
        let sm = self.slice_models[slice].ok_or(AuthError::InvalidatedSubmodel(slice))?;
        let record = models.get(sm.handle)?;
        if submodel_mac(&record.model, sm.seed) != record.m_s_mac {
            return Err(AuthError::RollbackOrRelocationAttack(slice));
        }
        Ok(record.model.clone())
    }

    /// Restores the submodel anchored on `kid`'s key entry; prediction
    /// resolves the final slice's anchor through this lookup.
    pub fn restore_submodel_by_kid(
        &self,
        models: &ModelLinkStore,
        kid: u64,
    ) -> Result<Vec<u8>, AuthError> {
        let &idx = self.kid_index.get(&kid).ok_or(AuthError::UnknownKid(kid))?;
        let entry = &self.entries[idx];
        let slice = self.slice_of_entry(idx);
        let (Some(handle), Some(seed)) = (entry.model_link, entry.seed) else {
            return Err(AuthError::InvalidatedSubmodel(slice));
        };
        let record = models.get(handle)?;
        if submodel_mac(&record.model, seed) != record.m_s_mac {
            return Err(AuthError::RollbackOrRelocationAttack(slice));
        }
        Ok(record.model.clone())
    }

    /// Deletes a data point: tombstones its entry, unlinks the data record,
    /// removes its fingerprint from the filter, and invalidates the submodel
    /// anchors (link and seed set to null) of its slice and every later
    /// slice. Returns the invalidated slice indices.
    pub fn delete_and_invalidate(
        &mut self,
        store: &DataStore,
        filter: &mut CuckooFilter,
        prf_key: &PrfKey,
        eid: &[u8; 32],
        kid: u64,
    ) -> Result<Vec<usize>, AuthError> {
        let &idx = self.kid_index.get(&kid).ok_or(AuthError::UnknownKid(kid))?;
        if !self.entries[idx].tag {
            return Err(AuthError::DeletedData(kid));
        }
        let handle = self.entries[idx].data_link.ok_or(AuthError::DeletedData(kid))?;
        let record = store.get(handle)?;
        let fp = fingerprint(prf_key, filter.config(), kid, &record.data, eid, self.owners[idx]);
        filter.delete(fp, kid_bucket_hash(kid));

        self.entries[idx].tag = false;
        self.entries[idx].data_link = None;
        self.entries[idx].model_link = None;
        self.entries[idx].seed = None;

        let first_slice = self.slice_of_entry(idx);
        let mut invalidated = Vec::new();
        for slice in first_slice..self.n_slices() {
            if let Some(sm) = self.slice_models[slice].take() {
                if let Some(owner) = sm.owner_entry {
                    self.entries[owner].model_link = None;
                    self.entries[owner].seed = None;
                }
            }
            invalidated.push(slice);
        }
        Ok(invalidated)
    }

    /// Slice indices whose submodels still need (re)training, in order.
    pub fn pending_slices(&self) -> Vec<usize> {
        (0..self.n_slices()).filter(|&i| self.slice_models[i].is_none()).collect()
    }

    /// `true` once every slice holds a valid submodel.
    pub fn chain_complete(&self) -> bool {
        self.slice_models.iter().all(|m| m.is_some())
    }

    /// Live (kid, owner) pairs of slices `0..=slice`, in entry order. This is
    /// the training order for the submodel of `slice`.
    pub fn cumulative_live(&self, slice: usize) -> Result<Vec<(u64, Option<u64>)>, AuthError> {
        if slice >= self.n_slices() {
            return Err(AuthError::BadSliceIndex(slice));
        }
        let end = self.slice_ends[slice].min(self.entries.len());
        Ok(self.entries[..end]
            .iter()
            .zip(&self.owners)
            .filter(|(e, _)| e.tag)
            .map(|(e, o)| (e.kid, *o))
            .collect())
    }

    /// The freshness MAC of slice `i`'s current submodel record.
    pub fn slice_model_mac(
        &self,
        models: &ModelLinkStore,
        slice: usize,
    ) -> Result<[u8; 32], AuthError> {
        let sm = self.slice_models[slice].ok_or(AuthError::InvalidatedSubmodel(slice))?;
        Ok(models.get(sm.handle)?.m_s_mac)
    }

    /// Record handle of slice `i`'s current submodel.
    pub fn slice_model_handle(&self, slice: usize) -> Option<u64> {
        self.slice_models[slice].map(|sm| sm.handle)
    }

    /// Total bytes of live (currently linked) submodel records.
    pub fn live_model_bytes(&self, models: &ModelLinkStore) -> usize {
        self.slice_models
            .iter()
            .flatten()
            .filter_map(|sm| models.get(sm.handle).ok())
            .map(|r| r.encoded_len())
            .sum()
    }

    /// Serializes the full lineage for the enclave's sealed state.
    pub fn seal_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.slice_ends.len() as u64).to_le_bytes());
        for end in &self.slice_ends {
            out.extend_from_slice(&(*end as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (entry, owner) in self.entries.iter().zip(&self.owners) {
            out.extend_from_slice(&entry.pack());
            match owner {
                None => out.push(0u8),
                Some(o) => {
                    out.push(1u8);
                    out.extend_from_slice(&o.to_le_bytes());
                }
            }
        }
        for sm in &self.slice_models {
            match sm {
                None => out.push(0u8),
                Some(sm) => {
                    out.push(1u8);
                    out.extend_from_slice(&sm.handle.to_le_bytes());
                    out.extend_from_slice(&sm.seed.to_le_bytes());
                    match sm.owner_entry {
                        None => out.push(0u8),
                        Some(idx) => {
                            out.push(1u8);
                            out.extend_from_slice(&(idx as u64).to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`ShardLineage::seal_bytes`].
    pub fn from_seal_bytes(bytes: &[u8]) -> Result<Self, AuthError> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], AuthError> {
            if *off + n > bytes.len() {
                return Err(AuthError::BadStoreFile);
            }
            let out = &bytes[*off..*off + n];
            *off += n;
            Ok(out)
        };
        let take_u64 = |off: &mut usize| -> Result<u64, AuthError> {
            Ok(u64::from_le_bytes(take(off, 8)?.try_into().unwrap()))
        };
        let n_slices = take_u64(&mut off)? as usize;
        let mut slice_ends = Vec::with_capacity(n_slices);
        for _ in 0..n_slices {
            slice_ends.push(take_u64(&mut off)? as usize);
        }
        let n_entries = take_u64(&mut off)? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        let mut owners = Vec::with_capacity(n_entries);
        let mut kid_index = HashMap::with_capacity(n_entries);
        for i in 0..n_entries {
            let packed: [u8; KEY_ENTRY_LEN] = take(&mut off, KEY_ENTRY_LEN)?.try_into().unwrap();
            let entry = KeyEntry::unpack(&packed);
            kid_index.insert(entry.kid, i);
            entries.push(entry);
            let owner = match take(&mut off, 1)?[0] {
                0 => None,
                1 => Some(take_u64(&mut off)?),
                _ => return Err(AuthError::BadStoreFile),
            };
            owners.push(owner);
        }
        let mut slice_models = Vec::with_capacity(n_slices);
        for _ in 0..n_slices {
            let sm = match take(&mut off, 1)?[0] {
                0 => None,
                1 => {
                    let handle = take_u64(&mut off)?;
                    let seed = take_u64(&mut off)?;
                    let owner_entry = match take(&mut off, 1)?[0] {
                        0 => None,
                        1 => Some(take_u64(&mut off)? as usize),
                        _ => return Err(AuthError::BadStoreFile),
                    };
                    Some(SliceModel { handle, seed, owner_entry })
                }
                _ => return Err(AuthError::BadStoreFile),
            };
            slice_models.push(sm);
        }
        if off != bytes.len() {
            return Err(AuthError::BadStoreFile);
        }
        Ok(Self { entries, owners, kid_index, slice_ends, slice_models })
    }
}
