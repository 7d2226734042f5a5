//! In-process simulation of the SGX functionality and the PoUL program
//! suite it hosts.
//!
//! The enclave boundary is this module boundary: the signing key, MAC key,
//! fingerprint PRF key, seed RNG and sealing key never cross it, and all
//! state the design places "in the enclave" (cuckoo filter, key lists,
//! session config) lives behind it. Execution integrity is by construction
//! (the host calls these methods); the transparent-enclave model means
//! programs, data and models are not secret, only the keys and seeds are.
//!
//! Untrusted storage is modelled by [`OutStores`], which the host owns and
//! passes into each call; anything there can be tampered with between calls
//! and the checked fetch/restore paths must catch it.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{AuthError, DataStore, MacKey, ModelLinkStore, ShardLineage};
use crate::crypto::{hmac_sha256, hmac_sha256_verify, mix64, sha256, sha256_parts};
use crate::filter::{fingerprint, kid_bucket_hash, CuckooFilter, FilterConfig, PrfKey};
use crate::messages::{
    compose_h_model, prog_id, Attestation, LearnProof, MembershipProof, PredictProof, Receipt,
    SessionId,
};
use crate::ml::{self, Dims, Hyperparams, ModelParams, SampleSet};
use crate::sisa::{self, DataPoint, SisaError, StepKind, StepTiming};

const SEAL_VERSION: u32 = 1;
const SEAL_NONCE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("no program set installed")]
    NotInstalled,
    #[error("unknown program id {0:?}")]
    UnknownProgram([u8; 8]),
    #[error("enclave session not configured")]
    NotConfigured,
    #[error("enclave session already configured")]
    AlreadyConfigured,
    #[error("session id mismatch")]
    SessionMismatch,
    #[error("shard index {0} out of range")]
    UnknownShard(usize),
    #[error("commitment digest is stale: filter state has moved on")]
    StaleCommitment,
    #[error("model digest mismatch: prediction refused")]
    WrongModel,
    #[error("requester is not authorized for kid {0:#018x}")]
    Unauthorized(u64),
    #[error("kid {0:#018x} not found in any shard")]
    KidNotFound(u64),
    #[error("malformed ecall input: {0}")]
    BadInput(&'static str),
    #[error("sealed blob is malformed")]
    SealFormat,
    #[error("sealed blob failed authentication")]
    SealAuth,
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Ml(#[from] ml::MlError),
    #[error(transparent)]
    Sisa(#[from] SisaError),
}

/// The canonical byte descriptors of the four installed programs. The
/// enclave identity is the hash of these, so changing any descriptor
/// changes the identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramSet {
    pub prog_k: Vec<u8>,
    pub prog_c: Vec<u8>,
    pub prog_t: Vec<u8>,
    pub prog_p: Vec<u8>,
}

impl ProgramSet {
    /// The production program suite.
    pub fn poul_v1() -> Self {
        Self {
            prog_k: b"poul.prog_k.v1: kid = xxh64(owner? || label || features)".to_vec(),
            prog_c: b"poul.prog_c.v1: cuckoo filter over prf(kid||data||eid||owner?)".to_vec(),
            prog_t: b"poul.prog_t.v1: incremental sgd chain over checked batches".to_vec(),
            prog_p: b"poul.prog_p.v1: aggregate prediction from checked final submodels"
                .to_vec(),
        }
    }

    pub fn concatenated(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in [&self.prog_k, &self.prog_c, &self.prog_t, &self.prog_p] {
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn hash_of(&self, id: &[u8; 8]) -> [u8; 32] {
        let bytes = match *id {
            prog_id::PROG_K => &self.prog_k,
            prog_id::PROG_C => &self.prog_c,
            prog_id::PROG_T => &self.prog_t,
            prog_id::PROG_P => &self.prog_p,
            _ => return [0u8; 32],
        };
        sha256(bytes)
    }
}

/// Derives the enclave identity: a SHA-256 measurement of the installed
/// program bytes.
pub fn derive_eid(programs: &ProgramSet) -> [u8; 32] {
    sha256(&programs.concatenated())
}

/// Per-session configuration the host commits to before any data flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnclaveSessionConfig {
    pub sid: SessionId,
    pub dims: Dims,
    pub hp: Hyperparams,
    pub m0_seed: u64,
    pub filter: FilterConfig,
    /// Declared per-slice point counts for each shard; commit order must
    /// fill these exactly.
    pub shard_slice_counts: Vec<Vec<usize>>,
}

/// The two untrusted out-of-enclave stores, owned by the host.
#[derive(Debug, Default)]
pub struct OutStores {
    pub data: DataStore,
    pub models: ModelLinkStore,
}

impl OutStores {
    pub fn new() -> Self {
        Self::default()
    }
}

/// A commit request: add a data point to a shard, or delete a committed kid.
pub enum CommitMsg<'a> {
    Add { shard: usize, point: &'a DataPoint },
    Del { kid: u64, requester: Option<u64> },
}

/// What a commit did, alongside its receipt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Added { kid: u64, shard: usize },
    Deleted { kid: u64, shard: usize, invalidated_slices: Vec<usize> },
}

struct Mem {
    filter: CuckooFilter,
    lineages: Vec<ShardLineage>,
}

/// The simulated enclave instance.
pub struct Enclave {
    signing: SigningKey,
    pk: VerifyingKey,
    mac_key: MacKey,
    prf_key: PrfKey,
    seed_key: [u8; 32],
    seed_counter: u64,
    seal_key: [u8; 32],
    programs: Option<ProgramSet>,
    eid: [u8; 32],
    config: Option<EnclaveSessionConfig>,
    mem: Option<Mem>,
    retrain_steps: u64,
}

impl Enclave {
    /// Key generation. With `entropy = None` all key material comes from the
    /// OS; a fixed value derives it deterministically (tests, replays).
    pub fn init(entropy: Option<u64>) -> Self {
        let mut material = [0u8; 144];
        match entropy {
            None => getrandom::fill(&mut material).expect("os entropy"),
            Some(seed) => {
                use rand_chacha::rand_core::RngCore;
                crate::crypto::chacha_from_u64(mix64(seed, 0x454e_434c)).fill_bytes(&mut material);
            }
        }
        let sk_bytes: [u8; 32] = material[0..32].try_into().unwrap();
        let signing = SigningKey::from_bytes(&sk_bytes);
        let pk = signing.verifying_key();
        Self {
            signing,
            pk,
            mac_key: MacKey(material[32..64].try_into().unwrap()),
            prf_key: PrfKey(material[64..80].try_into().unwrap()),
            seed_key: material[80..112].try_into().unwrap(),
            seed_counter: 0,
            seal_key: material[112..144].try_into().unwrap(),
            programs: None,
            eid: [0u8; 32],
            config: None,
            mem: None,
            retrain_steps: 0,
        }
    }

    /// Installs the program set and fixes the enclave identity.
    pub fn install(&mut self, programs: ProgramSet) -> [u8; 32] {
        self.eid = derive_eid(&programs);
        self.programs = Some(programs);
        self.eid
    }

    pub fn eid(&self) -> [u8; 32] {
        self.eid
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.pk
    }

    pub fn programs(&self) -> Option<&ProgramSet> {
        self.programs.as_ref()
    }

    /// The simulated hardware sealing key; the host persists it the way
    /// real hardware would fuse it. Exposing it is part of the simulation
    /// boundary, not of the protocol.
    pub fn sealing_key(&self) -> [u8; 32] {
        self.seal_key
    }

    /// Incremental-training steps executed so far (instrumentation).
    pub fn retrain_steps(&self) -> u64 {
        self.retrain_steps
    }

    /// Fresh 64-bit enclave randomness: a keyed PRF over a counter, so the
    /// stream never repeats within an enclave lifetime. `u64::MAX` is
    /// skipped because the packed key-entry layout uses it as the null
    /// sentinel.
    pub fn fresh_seed(&mut self) -> u64 {
        loop {
            let tag = hmac_sha256(&self.seed_key, &[&self.seed_counter.to_le_bytes()]);
            self.seed_counter += 1;
            let v = u64::from_le_bytes(tag[0..8].try_into().unwrap());
            if v != u64::MAX {
                return v;
            }
        }
    }

    fn sign(&self, payload: &[u8]) -> [u8; 64] {
        self.signing.sign(payload).to_bytes()
    }

    /// Signing under the enclave key for in-crate enclave programs (the
    /// auditor suite); never exported from the crate.
    pub(crate) fn sign_raw(&self, payload: &[u8]) -> [u8; 64] {
        self.sign(payload)
    }

    /// Creates the session state: an empty filter and one lineage per shard.
    pub fn configure_session(&mut self, config: EnclaveSessionConfig) -> Result<(), EnclaveError> {
        if self.programs.is_none() {
            return Err(EnclaveError::NotInstalled);
        }
        if self.config.is_some() {
            return Err(EnclaveError::AlreadyConfigured);
        }
        let evict_seed = u64::from_le_bytes(
            sha256_parts(&[&self.prf_key.0, b"evict"])[0..8].try_into().unwrap(),
        );
        let filter = CuckooFilter::new(config.filter, evict_seed)
            .map_err(AuthError::Filter)?;
        let lineages = config
            .shard_slice_counts
            .iter()
            .map(|counts| ShardLineage::new(counts))
            .collect();
        self.mem = Some(Mem { filter, lineages });
        self.config = Some(config);
        Ok(())
    }

    pub fn session_config(&self) -> Option<&EnclaveSessionConfig> {
        self.config.as_ref()
    }

    /// Current filter serialization (public commitment value `c`).
    pub fn filter_snapshot(&self) -> Result<Vec<u8>, EnclaveError> {
        Ok(self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?.filter.serialize())
    }

    pub fn filter_digest(&self) -> Result<[u8; 32], EnclaveError> {
        Ok(self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?.filter.digest())
    }

    /// Digest over all shard key lists, bound into receipts beside `h_c`.
    pub fn key_list_digest(&self) -> Result<[u8; 32], EnclaveError> {
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let digests: Vec<[u8; 32]> = mem.lineages.iter().map(|l| l.digest()).collect();
        let parts: Vec<&[u8]> = digests.iter().map(|d| d.as_slice()).collect();
        Ok(sha256_parts(&parts))
    }

    /// Total packed key-list bytes across shards (storage accounting).
    pub fn key_list_bytes(&self) -> Result<usize, EnclaveError> {
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        Ok(mem.lineages.iter().map(|l| l.entry_count() * crate::auth::KEY_ENTRY_LEN).sum())
    }

    /// Live (linked) submodel record bytes across shards.
    pub fn live_model_bytes(&self, stores: &OutStores) -> Result<usize, EnclaveError> {
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        Ok(mem.lineages.iter().map(|l| l.live_model_bytes(&stores.models)).sum())
    }

    /// Model-store handle of the current submodel for (shard, slice), if
    /// one is linked. White-box accessor for tests and the attack harness.
    pub fn submodel_handle(&self, shard: usize, slice: usize) -> Result<Option<u64>, EnclaveError> {
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let lineage = mem.lineages.get(shard).ok_or(EnclaveError::UnknownShard(shard))?;
        Ok(lineage.slice_model_handle(slice))
    }

    /// Checked restore of the (shard, slice) submodel's canonical bytes.
    pub fn submodel_bytes(
        &self,
        stores: &OutStores,
        shard: usize,
        slice: usize,
    ) -> Result<Vec<u8>, EnclaveError> {
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let lineage = mem.lineages.get(shard).ok_or(EnclaveError::UnknownShard(shard))?;
        Ok(lineage.restore_submodel_checked(&stores.models, slice)?)
    }

    fn receipt(&self, mem: &Mem) -> Result<Receipt, EnclaveError> {
        let cfg = self.config.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let programs = self.programs.as_ref().ok_or(EnclaveError::NotInstalled)?;
        let h_c = mem.filter.digest();
        let digests: Vec<[u8; 32]> = mem.lineages.iter().map(|l| l.digest()).collect();
        let parts: Vec<&[u8]> = digests.iter().map(|d| d.as_slice()).collect();
        let key_list_digest = sha256_parts(&parts);
        let payload = Receipt::signing_payload(
            cfg.sid,
            &self.eid,
            &h_c,
            &key_list_digest,
            &programs.hash_of(&prog_id::PROG_C),
            &programs.hash_of(&prog_id::PROG_K),
        );
        Ok(Receipt {
            sid: cfg.sid,
            eid: self.eid,
            h_c,
            key_list_digest,
            sigma_d: self.sign(&payload),
        })
    }

    /// Commit handler: `add` links a data point into the lineage and filter;
    /// `del` tombstones it, removes its fingerprint and invalidates every
    /// downstream submodel anchor. Both emit a signed receipt over the new
    /// filter/key-list state.
    pub fn commit(
        &mut self,
        stores: &mut OutStores,
        msg: CommitMsg<'_>,
    ) -> Result<(CommitOutcome, Receipt), EnclaveError> {
        let cfg = self.config.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let dims_input = cfg.dims.input;
        let eid = self.eid;
        let mem = self.mem.as_mut().ok_or(EnclaveError::NotConfigured)?;
        let outcome = match msg {
            CommitMsg::Add { shard, point } => {
                if shard >= mem.lineages.len() {
                    return Err(EnclaveError::UnknownShard(shard));
                }
                if point.features.len() != dims_input {
                    return Err(EnclaveError::BadInput("feature dimension mismatch"));
                }
                // prog_k: the enclave derives the kid itself.
                let base = sisa::base_bytes(&point.features, point.label);
                let kid = sisa::derive_kid(point.owner, &base);
                if kid != point.kid {
                    return Err(EnclaveError::BadInput("kid does not match data"));
                }
                let record = point.record_bytes();
                mem.lineages[shard].append_data(
                    &mut stores.data,
                    &mut mem.filter,
                    &self.mac_key,
                    &self.prf_key,
                    &eid,
                    kid,
                    point.owner,
                    &record,
                )?;
                CommitOutcome::Added { kid, shard }
            }
            CommitMsg::Del { kid, requester } => {
                let shard = mem
                    .lineages
                    .iter()
                    .position(|l| l.entry_of(kid).is_some())
                    .ok_or(EnclaveError::KidNotFound(kid))?;
                let owner = mem.lineages[shard].owner_of(kid).unwrap();
                if owner.is_some() && requester != owner {
                    return Err(EnclaveError::Unauthorized(kid));
                }
                let invalidated = mem.lineages[shard].delete_and_invalidate(
                    &stores.data,
                    &mut mem.filter,
                    &self.prf_key,
                    &eid,
                    kid,
                )?;
                CommitOutcome::Deleted { kid, shard, invalidated_slices: invalidated }
            }
        };
        let receipt = self.receipt(self.mem.as_ref().unwrap())?;
        Ok((outcome, receipt))
    }

    /// prog_t: runs every pending incremental step. Each step restores the
    /// predecessor checkpoint with its freshness MAC (or starts from the
    /// public M0), rebuilds the cumulative training set through the checked
    /// fetch path, trains, and checkpoints the result under a fresh seed.
    /// Halts on any integrity failure.
    pub fn prove_learning(
        &mut self,
        stores: &mut OutStores,
        c_digest_claim: &[u8; 32],
        kind: StepKind,
    ) -> Result<(LearnProof, Vec<StepTiming>), EnclaveError> {
        let cfg = self.config.clone().ok_or(EnclaveError::NotConfigured)?;
        let programs = self.programs.clone().ok_or(EnclaveError::NotInstalled)?;
        let eid = self.eid;
        {
            let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
            if &mem.filter.digest() != c_digest_claim {
                return Err(EnclaveError::StaleCommitment);
            }
        }

        let m0 = ml::init_model(cfg.dims, cfg.m0_seed)?;
        let mut timings = Vec::new();
        let n_shards = self.mem.as_ref().unwrap().lineages.len();
        for shard in 0..n_shards {
            let pending = self.mem.as_ref().unwrap().lineages[shard].pending_slices();
            for slice in pending {
                let t_restore = std::time::Instant::now();
                let prev = if slice == 0 {
                    m0.clone()
                } else {
                    let mem = self.mem.as_ref().unwrap();
                    let bytes =
                        mem.lineages[shard].restore_submodel_checked(&stores.models, slice - 1)?;
                    ModelParams::from_canonical_bytes(cfg.dims, &bytes)?
                };
                let restore_us = t_restore.elapsed().as_micros() as u64;

                let t_train = std::time::Instant::now();
                let (set, n) = {
                    let mem = self.mem.as_ref().unwrap();
                    let lineage = &mem.lineages[shard];
                    let live = lineage.cumulative_live(slice)?;
                    let mut set = SampleSet::with_capacity(cfg.dims.input, live.len());
                    for (kid, _owner) in &live {
                        let bytes = lineage.fetch_data_checked(
                            &stores.data,
                            &mem.filter,
                            &self.mac_key,
                            &self.prf_key,
                            &eid,
                            *kid,
                        )?;
                        let (features, label, _) = sisa::decode_record(&bytes, cfg.dims.input)?;
                        set.push(&features, label);
                    }
                    let n = live.len();
                    (set, n)
                };
                let order: Vec<u32> = (0..n as u32).collect();
                let mut model =
                    ml::train_sgd(&prev, &set, &order, &sisa::step_hyperparams(&cfg.hp, slice))?;
                model.slice_index = (slice + 1) as u64;
                let train_us = t_train.elapsed().as_micros() as u64;

                let t_ckpt = std::time::Instant::now();
                let seed = self.fresh_seed();
                let bytes = model.canonical_bytes();
                let mem = self.mem.as_mut().unwrap();
                let anchor = mem.lineages[shard].expected_anchor(slice)?;
                mem.lineages[shard].store_submodel(
                    &mut stores.models,
                    slice,
                    &bytes,
                    seed,
                    anchor,
                )?;
                let checkpoint_us = t_ckpt.elapsed().as_micros() as u64;

                self.retrain_steps += 1;
                timings.push(StepTiming {
                    shard,
                    slice,
                    kind,
                    samples: n,
                    train_us,
                    checkpoint_us,
                    restore_us,
                });
            }
        }

        let mem = self.mem.as_ref().unwrap();
        let mut final_macs = Vec::with_capacity(n_shards);
        for lineage in &mem.lineages {
            let last = lineage.n_slices() - 1;
            final_macs.push(lineage.slice_model_mac(&stores.models, last)?);
        }
        let h_model = compose_h_model(&final_macs);
        let c_digest = mem.filter.digest();
        let payload = LearnProof::signing_payload(
            cfg.sid,
            &eid,
            &c_digest,
            &h_model,
            &programs.hash_of(&prog_id::PROG_T),
        );
        let proof = LearnProof {
            sid: cfg.sid,
            eid,
            c_digest,
            h_model,
            sigma_m: self.sign(&payload),
        };
        Ok((proof, timings))
    }

    /// prog_p: restores every shard's chain-final submodel through its
    /// freshness MAC, refuses to answer unless the combined digest matches
    /// the caller's `h_model`, then aggregates the constituent predictions.
    pub fn prove_prediction(
        &self,
        stores: &OutStores,
        test: &[f32],
        h_model_claim: &[u8; 32],
    ) -> Result<PredictProof, EnclaveError> {
        let cfg = self.config.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let programs = self.programs.as_ref().ok_or(EnclaveError::NotInstalled)?;
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        if test.len() != cfg.dims.input {
            return Err(EnclaveError::BadInput("test dimension mismatch"));
        }

        let mut final_macs = Vec::with_capacity(mem.lineages.len());
        for lineage in &mem.lineages {
            let last = lineage.n_slices() - 1;
            final_macs.push(lineage.slice_model_mac(&stores.models, last)?);
        }
        let h_model = compose_h_model(&final_macs);
        if &h_model != h_model_claim {
            return Err(EnclaveError::WrongModel);
        }

        let mut models = Vec::with_capacity(mem.lineages.len());
        for lineage in &mem.lineages {
            let last = lineage.n_slices() - 1;
            let bytes = lineage.restore_submodel_checked(&stores.models, last)?;
            models.push(ModelParams::from_canonical_bytes(cfg.dims, &bytes)?);
        }
        let refs: Vec<&ModelParams> = models.iter().collect();
        let prediction = sisa::aggregate_predict(&refs, test)?;

        let payload = PredictProof::signing_payload(
            cfg.sid,
            &self.eid,
            &prediction,
            test,
            &h_model,
            &programs.hash_of(&prog_id::PROG_P),
        );
        Ok(PredictProof {
            sid: cfg.sid,
            eid: self.eid,
            prediction,
            test: test.to_vec(),
            h_model,
            sigma_p: self.sign(&payload),
        })
    }

    /// prog_c query path: attested membership answer for a (kid, data,
    /// owner) triple. For a kid the key list knows, the tag bit answers
    /// exactly (this is what makes deleted-point lookups immune to filter
    /// false positives from fingerprint twins); unknown kids fall back to
    /// the approximate filter query.
    pub fn query_membership(
        &self,
        kid: u64,
        data: &[u8],
        owner: Option<u64>,
    ) -> Result<MembershipProof, EnclaveError> {
        let cfg = self.config.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let mem = self.mem.as_ref().ok_or(EnclaveError::NotConfigured)?;
        let present = match mem.lineages.iter().find_map(|l| l.entry_of(kid)) {
            Some(entry) => entry.tag,
            None => {
                let fp =
                    fingerprint(&self.prf_key, mem.filter.config(), kid, data, &self.eid, owner);
                mem.filter.query(fp, kid_bucket_hash(kid))
            }
        };
        let c_digest = mem.filter.digest();
        let payload =
            MembershipProof::signing_payload(cfg.sid, &self.eid, kid, present, &c_digest);
        Ok(MembershipProof {
            sid: cfg.sid,
            eid: self.eid,
            kid,
            present,
            c_digest,
            sigma: self.sign(&payload),
        })
    }

    /// Generic F_SGX resume: runs the named program over the input and
    /// returns its output with an attestation over `eid | prog | H(outp)`.
    /// Program-level errors propagate without emitting an attestation.
    pub fn resume(
        &mut self,
        stores: &mut OutStores,
        prog: [u8; 8],
        input: &[u8],
    ) -> Result<(Vec<u8>, Attestation), EnclaveError> {
        if self.programs.is_none() {
            return Err(EnclaveError::NotInstalled);
        }
        let output: Vec<u8> = match prog {
            prog_id::PROG_K => {
                let cfg = self.config.as_ref().ok_or(EnclaveError::NotConfigured)?;
                let (features, label, owner) = sisa::decode_record(input, cfg.dims.input)
                    .map_err(|_| EnclaveError::BadInput("bad record bytes"))?;
                let kid = sisa::derive_kid(owner, &sisa::base_bytes(&features, label));
                kid.to_le_bytes().to_vec()
            }
            prog_id::PROG_C => {
                if input.len() < 9 {
                    return Err(EnclaveError::BadInput("prog_c input too short"));
                }
                let kid = u64::from_le_bytes(input[0..8].try_into().unwrap());
                let (owner, data) = match input[8] {
                    0 => (None, &input[9..]),
                    1 if input.len() >= 17 => (
                        Some(u64::from_le_bytes(input[9..17].try_into().unwrap())),
                        &input[17..],
                    ),
                    _ => return Err(EnclaveError::BadInput("bad owner marker")),
                };
                let proof = self.query_membership(kid, data, owner)?;
                let mut out = vec![proof.present as u8];
                out.extend_from_slice(&proof.c_digest);
                out
            }
            prog_id::PROG_T => {
                let claim: [u8; 32] = input
                    .try_into()
                    .map_err(|_| EnclaveError::BadInput("prog_t expects a 32-byte digest"))?;
                let (proof, _) = self.prove_learning(stores, &claim, StepKind::Learn)?;
                proof.h_model.to_vec()
            }
            prog_id::PROG_P => {
                if input.len() < 32 || (input.len() - 32) % 4 != 0 {
                    return Err(EnclaveError::BadInput("prog_p expects digest + f32 input"));
                }
                let claim: [u8; 32] = input[0..32].try_into().unwrap();
                let test: Vec<f32> = input[32..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let proof = self.prove_prediction(stores, &test, &claim)?;
                proof.prediction.canonical_bytes()
            }
            other => return Err(EnclaveError::UnknownProgram(other)),
        };
        let output_hash = sha256(&output);
        let payload = Attestation::signing_payload(&self.eid, &prog, &output_hash);
        let attestation = Attestation {
            eid: self.eid,
            prog_id: prog,
            output_hash,
            sigma: self.sign(&payload),
        };
        Ok((output, attestation))
    }

    /// Seals the full enclave state (keys, counters, programs, session,
    /// filter and key lists) into `nonce | ciphertext | tag` under the
    /// sealing key. Plumbing for persistence across process restarts.
    pub fn seal_state(&self) -> Vec<u8> {
        let mut plain = Vec::new();
        plain.extend_from_slice(&SEAL_VERSION.to_le_bytes());
        plain.extend_from_slice(&self.signing.to_bytes());
        plain.extend_from_slice(&self.mac_key.0);
        plain.extend_from_slice(&self.prf_key.0);
        plain.extend_from_slice(&self.seed_key);
        plain.extend_from_slice(&self.seed_counter.to_le_bytes());
        plain.extend_from_slice(&self.retrain_steps.to_le_bytes());
        write_opt_bytes(&mut plain, self.programs.as_ref().map(|p| p.concatenated()));
        let cfg_json =
            self.config.as_ref().map(|c| serde_json::to_vec(c).expect("config serializes"));
        write_opt_bytes(&mut plain, cfg_json);
        match &self.mem {
            None => plain.push(0u8),
            Some(mem) => {
                plain.push(1u8);
                let fbytes = mem.filter.serialize();
                plain.extend_from_slice(&(fbytes.len() as u64).to_le_bytes());
                plain.extend_from_slice(&fbytes);
                plain.extend_from_slice(&mem.filter.evict_counter().to_le_bytes());
                plain.extend_from_slice(&(mem.lineages.len() as u64).to_le_bytes());
                for lineage in &mem.lineages {
                    let lb = lineage.seal_bytes();
                    plain.extend_from_slice(&(lb.len() as u64).to_le_bytes());
                    plain.extend_from_slice(&lb);
                }
            }
        }

        let mut nonce = [0u8; SEAL_NONCE_LEN];
        getrandom::fill(&mut nonce).expect("os entropy");
        let mut ct = plain;
        apply_keystream(&self.seal_key, &nonce, &mut ct);
        let tag = hmac_sha256(&seal_mac_key(&self.seal_key), &[&nonce, &ct]);
        let mut blob = Vec::with_capacity(SEAL_NONCE_LEN + ct.len() + 32);
        blob.extend_from_slice(&nonce);
        blob.extend_from_slice(&ct);
        blob.extend_from_slice(&tag);
        blob
    }

    /// Rebuilds an enclave from a sealed blob. Rejects on any tag mismatch,
    /// including blobs sealed by a different enclave instance.
    pub fn unseal_state(seal_key: &[u8; 32], blob: &[u8]) -> Result<Self, EnclaveError> {
        if blob.len() < SEAL_NONCE_LEN + 32 {
            return Err(EnclaveError::SealFormat);
        }
        let nonce: [u8; SEAL_NONCE_LEN] = blob[0..SEAL_NONCE_LEN].try_into().unwrap();
        let tag: [u8; 32] = blob[blob.len() - 32..].try_into().unwrap();
        let ct = &blob[SEAL_NONCE_LEN..blob.len() - 32];
        if !hmac_sha256_verify(&seal_mac_key(seal_key), &[&nonce, ct], &tag) {
            return Err(EnclaveError::SealAuth);
        }
        let mut plain = ct.to_vec();
        apply_keystream(seal_key, &nonce, &mut plain);

        let mut r = SealReader::new(&plain);
        let version = r.u32()?;
        if version != SEAL_VERSION {
            return Err(EnclaveError::SealFormat);
        }
        let sk_bytes: [u8; 32] = r.array()?;
        let signing = SigningKey::from_bytes(&sk_bytes);
        let pk = signing.verifying_key();
        let mac_key = MacKey(r.array()?);
        let prf_key = PrfKey(r.array()?);
        let seed_key: [u8; 32] = r.array()?;
        let seed_counter = r.u64()?;
        let retrain_steps = r.u64()?;
        let programs = match r.opt_bytes()? {
            None => None,
            Some(bytes) => Some(parse_programs(&bytes)?),
        };
        let eid = programs.as_ref().map(derive_eid).unwrap_or([0u8; 32]);
        let config: Option<EnclaveSessionConfig> = match r.opt_bytes()? {
            None => None,
            Some(bytes) => {
                Some(serde_json::from_slice(&bytes).map_err(|_| EnclaveError::SealFormat)?)
            }
        };
        let mem = if r.u8()? == 1 {
            let flen = r.u64()? as usize;
            let fbytes = r.bytes(flen)?;
            let evict_seed =
                u64::from_le_bytes(sha256_parts(&[&prf_key.0, b"evict"])[0..8].try_into().unwrap());
            let mut filter = CuckooFilter::deserialize(fbytes, evict_seed)
                .map_err(|_| EnclaveError::SealFormat)?;
            filter.set_evict_counter(r.u64()?);
            let n = r.u64()? as usize;
            let mut lineages = Vec::with_capacity(n);
            for _ in 0..n {
                let len = r.u64()? as usize;
                let lb = r.bytes(len)?;
                lineages
                    .push(ShardLineage::from_seal_bytes(lb).map_err(|_| EnclaveError::SealFormat)?);
            }
            Some(Mem { filter, lineages })
        } else {
            None
        };
        Ok(Self {
            signing,
            pk,
            mac_key,
            prf_key,
            seed_key,
            seed_counter,
            seal_key: *seal_key,
            programs,
            eid,
            config,
            mem,
            retrain_steps,
        })
    }

    /// Digest over the sealed-relevant state, for seal/unseal equality
    /// checks in tests.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut parts: Vec<Vec<u8>> = vec![
            self.eid.to_vec(),
            self.pk.to_bytes().to_vec(),
            self.seed_counter.to_le_bytes().to_vec(),
        ];
        if let Some(mem) = &self.mem {
            parts.push(mem.filter.digest().to_vec());
            for l in &mem.lineages {
                parts.push(l.digest().to_vec());
            }
        }
        let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
        sha256_parts(&refs)
    }
}

fn seal_mac_key(seal_key: &[u8; 32]) -> [u8; 32] {
    sha256_parts(&[seal_key, b"poul.seal.mac.v1"])
}

/// ChaCha20 keystream XOR for the sealed-state envelope (encrypt-then-MAC).
fn apply_keystream(seal_key: &[u8; 32], nonce: &[u8; SEAL_NONCE_LEN], data: &mut [u8]) {
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    let key = sha256_parts(&[seal_key, nonce, b"poul.seal.enc.v1"]);
    let mut rng = rand_chacha::ChaCha20Rng::from_seed(key);
    let mut ks = vec![0u8; data.len()];
    rng.fill_bytes(&mut ks);
    for (d, k) in data.iter_mut().zip(ks.iter()) {
        *d ^= k;
    }
}

fn write_opt_bytes(out: &mut Vec<u8>, bytes: Option<Vec<u8>>) {
    match bytes {
        None => out.push(0u8),
        Some(b) => {
            out.push(1u8);
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(&b);
        }
    }
}

fn parse_programs(concat: &[u8]) -> Result<ProgramSet, EnclaveError> {
    let mut r = SealReader::new(concat);
    let mut parts = Vec::with_capacity(4);
    for _ in 0..4 {
        let len = r.u64()? as usize;
        parts.push(r.bytes(len)?.to_vec());
    }
    let mut it = parts.into_iter();
    Ok(ProgramSet {
        prog_k: it.next().unwrap(),
        prog_c: it.next().unwrap(),
        prog_t: it.next().unwrap(),
        prog_p: it.next().unwrap(),
    })
}

struct SealReader<'a> {
    data: &'a [u8],
    off: usize,
}

impl<'a> SealReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, off: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], EnclaveError> {
        if self.off + n > self.data.len() {
            return Err(EnclaveError::SealFormat);
        }
        let out = &self.data[self.off..self.off + n];
        self.off += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], EnclaveError> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, EnclaveError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, EnclaveError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EnclaveError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn opt_bytes(&mut self) -> Result<Option<Vec<u8>>, EnclaveError> {
        if self.u8()? == 0 {
            return Ok(None);
        }
        let len = self.u64()? as usize;
        Ok(Some(self.bytes(len)?.to_vec()))
    }
}

/// Verifies a generic attestation under a pinned verification key.
pub fn verify_attestation(pk: &VerifyingKey, att: &Attestation) -> bool {
    let payload = Attestation::signing_payload(&att.eid, &att.prog_id, &att.output_hash);
    pk.verify(&payload, &Signature::from_bytes(&att.sigma)).is_ok()
}

const KX_DOMAIN: &[u8] = b"poul.kx.v1";
const KX_KEY_DOMAIN: &[u8] = b"poul.kx.key.v1";

/// One side's signed ephemeral key-exchange message, bound to both enclave
/// identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KxMessage {
    pub eid: [u8; 32],
    pub peer_eid: [u8; 32],
    pub eph_pub: [u8; 32],
    pub sigma: [u8; 64],
}

/// Ephemeral secret held between `kx_start` and `kx_finish`.
pub struct KxState {
    secret: x25519_dalek::StaticSecret,
    own_msg: KxMessage,
}

fn kx_payload(eid: &[u8; 32], peer_eid: &[u8; 32], eph_pub: &[u8; 32]) -> Vec<u8> {
    let mut p = Vec::with_capacity(KX_DOMAIN.len() + 96);
    p.extend_from_slice(KX_DOMAIN);
    p.extend_from_slice(eid);
    p.extend_from_slice(peer_eid);
    p.extend_from_slice(eph_pub);
    p
}

impl Enclave {
    /// Starts an authenticated Diffie-Hellman exchange with the enclave
    /// identified by `peer_eid`.
    pub fn kx_start(&mut self, peer_eid: &[u8; 32]) -> KxState {
        let mut eph = [0u8; 32];
        for chunk in eph.chunks_exact_mut(8) {
            chunk.copy_from_slice(&self.fresh_seed().to_le_bytes());
        }
        let secret = x25519_dalek::StaticSecret::from(eph);
        let eph_pub = x25519_dalek::PublicKey::from(&secret).to_bytes();
        let payload = kx_payload(&self.eid, peer_eid, &eph_pub);
        let own_msg = KxMessage {
            eid: self.eid,
            peer_eid: *peer_eid,
            eph_pub,
            sigma: self.sign(&payload),
        };
        KxState { secret, own_msg }
    }

    /// Completes the exchange: verifies the peer's signature under the
    /// pinned key and that the identities match, then derives the shared
    /// session key. Aborts on any mismatch.
    pub fn kx_finish(
        &self,
        state: &KxState,
        peer_msg: &KxMessage,
        peer_pk: &VerifyingKey,
    ) -> Result<[u8; 32], EnclaveError> {
        if peer_msg.peer_eid != self.eid || peer_msg.eid != state.own_msg.peer_eid {
            return Err(EnclaveError::BadInput("kx identity mismatch"));
        }
        let payload = kx_payload(&peer_msg.eid, &peer_msg.peer_eid, &peer_msg.eph_pub);
        peer_pk
            .verify(&payload, &Signature::from_bytes(&peer_msg.sigma))
            .map_err(|_| EnclaveError::BadInput("kx signature rejected"))?;
        let shared = state
            .secret
            .diffie_hellman(&x25519_dalek::PublicKey::from(peer_msg.eph_pub));
        // Symmetric derivation: order the ephemeral keys lexicographically.
        let (lo, hi) = if state.own_msg.eph_pub <= peer_msg.eph_pub {
            (state.own_msg.eph_pub, peer_msg.eph_pub)
        } else {
            (peer_msg.eph_pub, state.own_msg.eph_pub)
        };
        Ok(sha256_parts(&[KX_KEY_DOMAIN, shared.as_bytes(), &lo, &hi]))
    }

    pub fn kx_message(state: &KxState) -> KxMessage {
        state.own_msg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::prog_id::*;

    fn installed() -> Enclave {
        let mut e = Enclave::init(Some(42));
        e.install(ProgramSet::poul_v1());
        e
    }

    #[test]
    fn sign_verify_roundtrip_and_forgery_rejection() {
        let e = installed();
        let pk = e.public_key();
        let sig = e.sign(b"message");
        assert!(pk.verify(b"message", &Signature::from_bytes(&sig)).is_ok());
        assert!(pk.verify(b"messagf", &Signature::from_bytes(&sig)).is_err());

        let other = Enclave::init(Some(43));
        assert!(other.public_key().verify(b"message", &Signature::from_bytes(&sig)).is_err());

        // Random forgeries never verify.
        use rand_chacha::rand_core::RngCore;
        let mut rng = crate::crypto::chacha_from_u64(77);
        for _ in 0..1000 {
            let mut forged = [0u8; 64];
            rng.fill_bytes(&mut forged);
            let mut msg = [0u8; 24];
            rng.fill_bytes(&mut msg);
            assert!(pk.verify(&msg, &Signature::from_bytes(&forged)).is_err());
        }
    }

    #[test]
    fn eid_tracks_program_bytes() {
        let a = derive_eid(&ProgramSet::poul_v1());
        let b = derive_eid(&ProgramSet::poul_v1());
        assert_eq!(a, b);
        let mut tampered = ProgramSet::poul_v1();
        tampered.prog_t[0] ^= 1;
        assert_ne!(derive_eid(&tampered), a);

        // Same programs, separate init: same eid, different pk.
        let e1 = installed();
        let mut e2 = Enclave::init(Some(1000));
        e2.install(ProgramSet::poul_v1());
        assert_eq!(e1.eid(), e2.eid());
        assert_ne!(e1.public_key().to_bytes(), e2.public_key().to_bytes());
    }

    #[test]
    fn fresh_seed_never_repeats_at_scale() {
        let mut e = installed();
        let mut seen = std::collections::HashSet::with_capacity(1_000_000);
        for _ in 0..1_000_000u32 {
            assert!(seen.insert(e.fresh_seed()), "duplicate seed");
        }
    }

    #[test]
    fn fresh_seed_passes_monobit_sanity() {
        let mut e = installed();
        let mut ones = 0u64;
        let draws = 10_000u64;
        for _ in 0..draws {
            ones += e.fresh_seed().count_ones() as u64;
        }
        let total = draws * 64;
        let frac = ones as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.01, "monobit fraction {frac}");
    }

    #[test]
    fn two_instances_have_disjoint_seed_streams() {
        let mut a = installed();
        let mut b = Enclave::init(Some(4242));
        b.install(ProgramSet::poul_v1());
        let sa: Vec<u64> = (0..100).map(|_| a.fresh_seed()).collect();
        let sb: Vec<u64> = (0..100).map(|_| b.fresh_seed()).collect();
        assert!(sa.iter().all(|v| !sb.contains(v)));
    }

    #[test]
    fn resume_unknown_program_rejected() {
        let mut e = installed();
        let mut stores = OutStores::new();
        assert!(matches!(
            e.resume(&mut stores, *b"prog_x\0\0", b""),
            Err(EnclaveError::UnknownProgram(_))
        ));
    }

    #[test]
    fn attestation_verifies_and_tamper_fails() {
        let mut e = installed();
        e.configure_session(EnclaveSessionConfig {
            sid: SessionId(1),
            dims: Dims::new(4, 3, 2),
            hp: Hyperparams { batch_size: 2, epochs: 1, learning_rate: 0.1, rng_seed: 5 },
            m0_seed: 1,
            filter: FilterConfig { bucket_count: 64, ..Default::default() },
            shard_slice_counts: vec![vec![1]],
        })
        .unwrap();
        let mut stores = OutStores::new();
        let point = DataPoint::new(vec![1.0, 0.0, 1.0, 0.0], 1);
        let (out, att) = e
            .resume(&mut stores, PROG_K, &point.record_bytes())
            .unwrap();
        assert_eq!(out, point.kid.to_le_bytes());
        assert!(verify_attestation(&e.public_key(), &att));
        let mut bad = att.clone();
        bad.output_hash[0] ^= 1;
        assert!(!verify_attestation(&e.public_key(), &bad));
    }

    #[test]
    fn seal_unseal_roundtrip_and_tamper_rejection() {
        let mut e = installed();
        e.configure_session(EnclaveSessionConfig {
            sid: SessionId(2),
            dims: Dims::new(4, 3, 2),
            hp: Hyperparams { batch_size: 2, epochs: 1, learning_rate: 0.1, rng_seed: 5 },
            m0_seed: 1,
            filter: FilterConfig { bucket_count: 64, ..Default::default() },
            shard_slice_counts: vec![vec![2, 2]],
        })
        .unwrap();
        let mut stores = OutStores::new();
        for i in 0..4 {
            let p = DataPoint::new(vec![i as f32, 1.0, 0.0, 1.0], (i % 2) as u32);
            e.commit(&mut stores, CommitMsg::Add { shard: 0, point: &p }).unwrap();
        }

        let blob = e.seal_state();
        let restored = Enclave::unseal_state(&e.sealing_key(), &blob).unwrap();
        assert_eq!(restored.state_digest(), e.state_digest());
        assert_eq!(restored.eid(), e.eid());
        assert_eq!(restored.public_key().to_bytes(), e.public_key().to_bytes());

        // Flipped ciphertext byte: reject.
        let mut tampered = blob.clone();
        tampered[SEAL_NONCE_LEN + 3] ^= 1;
        assert!(matches!(
            Enclave::unseal_state(&e.sealing_key(), &tampered),
            Err(EnclaveError::SealAuth)
        ));

        // Different instance key: reject.
        let other = Enclave::init(Some(4040));
        assert!(matches!(
            Enclave::unseal_state(&other.sealing_key(), &blob),
            Err(EnclaveError::SealAuth)
        ));
    }
}
