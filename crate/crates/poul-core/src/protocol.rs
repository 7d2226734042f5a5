//! The commit-and-prove protocol: server-side message handlers, the
//! verifier's assertions, and the setup/deletion phase orchestrators.
//!
//! The verifier pins the enclave's verification key and identity at
//! initialization and afterwards performs exactly one signature check plus
//! constant-size equality checks per assertion, regardless of slice count
//! or how many submodels a deletion retrained — the enclave self-verifies
//! the chain interior.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ed25519_dalek::{Signature, Verifier as _, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{CallPayload, ExecChannelEnd, ObservedCall};
use crate::enclave::{
    CommitMsg, CommitOutcome, Enclave, EnclaveError, EnclaveSessionConfig, OutStores, ProgramSet,
};
use crate::filter::FilterConfig;
use crate::messages::{
    prog_id, LearnProof, MembershipProof, PredictProof, Receipt, SessionId,
};
use crate::ml::{Dims, Hyperparams};
use crate::sisa::{DataPoint, ShardPlan, SisaError, StepKind, StepTiming};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("verification rejected: {0}")]
    Rejected(Reject),
    #[error("session has no committed dataset")]
    NoDataset,
    #[error("kid {0:#018x} is not part of this session")]
    UnknownKid(u64),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Sisa(#[from] SisaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("transcript record is malformed: {0}")]
    BadTranscript(String),
}

/// Why a verifier assertion failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reject {
    BadSignature,
    WrongSession,
    WrongEnclave,
    FilterDigestMismatch,
    ModelDigestMismatch,
    WrongChallenge,
    NoReceiptYet,
    NoLearnProofYet,
    UnexpectedMembership,
}

impl std::fmt::Display for Reject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Public session parameters agreed between owner and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub sid: SessionId,
    pub dims: Dims,
    pub hp: Hyperparams,
    pub n_shards: usize,
    pub n_slices: usize,
    pub m0_seed: u64,
    pub plan_seed: u64,
    pub filter: FilterConfig,
}

impl SessionConfig {
    pub fn desk_default(sid: u64) -> Self {
        Self {
            sid: SessionId(sid),
            dims: Dims::purchase_default(),
            hp: Hyperparams { batch_size: 64, epochs: 2, learning_rate: 0.02, rng_seed: 1 },
            n_shards: 1,
            n_slices: 6,
            m0_seed: 0,
            plan_seed: 0,
            filter: FilterConfig { bucket_count: 1 << 12, ..FilterConfig::default() },
        }
    }
}

/// The server: execution enclave plus the untrusted stores and the public
/// shard plan. `stores` is deliberately public — it models memory the
/// server (or an attacker) can rewrite at will between enclave calls.
pub struct Server {
    enclave: Enclave,
    pub stores: OutStores,
    cfg: SessionConfig,
    plan: Option<ShardPlan>,
    locator: HashMap<u64, (usize, usize, usize)>,
    audit_channel: Option<ExecChannelEnd>,
    pending_observations: Vec<ObservedCall>,
}

impl Server {
    /// Initializes the enclave (keygen + program install). `entropy` seeds
    /// the enclave key material deterministically when given.
    pub fn new(cfg: SessionConfig, entropy: Option<u64>) -> Self {
        let mut enclave = Enclave::init(entropy);
        enclave.install(ProgramSet::poul_v1());
        Self {
            enclave,
            stores: OutStores::new(),
            cfg,
            plan: None,
            locator: HashMap::new(),
            audit_channel: None,
            pending_observations: Vec::new(),
        }
    }

    /// Rebuilds a server from persisted parts: an unsealed enclave, the
    /// store files, the shard plan and the dataset (to restore the kid
    /// locator).
    pub fn from_parts(
        cfg: SessionConfig,
        enclave: Enclave,
        stores: OutStores,
        plan: ShardPlan,
        points: &[DataPoint],
    ) -> Self {
        let mut locator = HashMap::new();
        for (j, shard_slices) in plan.slices.iter().enumerate() {
            for (i, slice) in shard_slices.iter().enumerate() {
                for (pos, &idx) in slice.iter().enumerate() {
                    locator.insert(points[idx as usize].kid, (j, i, pos));
                }
            }
        }
        Self {
            enclave,
            stores,
            cfg,
            plan: Some(plan),
            locator,
            audit_channel: None,
            pending_observations: Vec::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.enclave.public_key()
    }

    pub fn eid(&self) -> [u8; 32] {
        self.enclave.eid()
    }

    pub fn programs(&self) -> ProgramSet {
        self.enclave.programs().cloned().expect("programs installed at construction")
    }

    pub fn plan(&self) -> Option<&ShardPlan> {
        self.plan.as_ref()
    }

    /// Direct enclave access for channel establishment and white-box tests;
    /// part of the in-process simulation boundary, not of the protocol.
    pub fn enclave_mut(&mut self) -> &mut Enclave {
        &mut self.enclave
    }

    pub fn enclave(&self) -> &Enclave {
        &self.enclave
    }

    pub fn set_audit_channel(&mut self, channel: ExecChannelEnd) {
        self.audit_channel = Some(channel);
    }

    /// The server's own end of the audited channel (the server is the
    /// adversary in attack scenarios and may wrap arbitrary payloads).
    pub fn audit_channel_mut(&mut self) -> Option<&mut ExecChannelEnd> {
        self.audit_channel.as_mut()
    }

    pub fn retrain_steps(&self) -> u64 {
        self.enclave.retrain_steps()
    }

    pub fn filter_digest(&self) -> Result<[u8; 32], ProtocolError> {
        Ok(self.enclave.filter_digest()?)
    }

    pub fn filter_snapshot(&self) -> Result<Vec<u8>, ProtocolError> {
        Ok(self.enclave.filter_snapshot()?)
    }

    /// Builds the shard plan for a dataset and configures the enclave
    /// session to expect exactly that layout.
    pub fn init_session(&mut self, points: &[DataPoint]) -> Result<(), ProtocolError> {
        let plan =
            ShardPlan::build(points.len(), self.cfg.n_shards, self.cfg.n_slices, self.cfg.plan_seed)?;
        let shard_slice_counts: Vec<Vec<usize>> =
            (0..self.cfg.n_shards).map(|j| plan.slice_counts(j)).collect();
        self.enclave.configure_session(EnclaveSessionConfig {
            sid: self.cfg.sid,
            dims: self.cfg.dims,
            hp: self.cfg.hp,
            m0_seed: self.cfg.m0_seed,
            filter: self.cfg.filter,
            shard_slice_counts,
        })?;
        self.locator.clear();
        for (j, shard_slices) in plan.slices.iter().enumerate() {
            for (i, slice) in shard_slices.iter().enumerate() {
                for (pos, &idx) in slice.iter().enumerate() {
                    self.locator.insert(points[idx as usize].kid, (j, i, pos));
                }
            }
        }
        self.plan = Some(plan);
        Ok(())
    }

    /// (shard, slice, position) of a committed kid.
    pub fn locate(&self, kid: u64) -> Result<(usize, usize, usize), ProtocolError> {
        self.locator.get(&kid).copied().ok_or(ProtocolError::UnknownKid(kid))
    }

    /// Commit handler (`msg = add`).
    pub fn on_commit_add(
        &mut self,
        shard: usize,
        point: &DataPoint,
    ) -> Result<Receipt, ProtocolError> {
        let (_, receipt) =
            self.enclave.commit(&mut self.stores, CommitMsg::Add { shard, point })?;
        Ok(receipt)
    }

    /// Commit handler (`msg = del`). Returns the invalidated slice indices
    /// of the affected shard alongside the receipt.
    pub fn on_commit_del(
        &mut self,
        kid: u64,
        requester: Option<u64>,
    ) -> Result<(Vec<usize>, Receipt), ProtocolError> {
        let (outcome, receipt) =
            self.enclave.commit(&mut self.stores, CommitMsg::Del { kid, requester })?;
        match outcome {
            CommitOutcome::Deleted { invalidated_slices, .. } => Ok((invalidated_slices, receipt)),
            CommitOutcome::Added { .. } => unreachable!("del commit cannot add"),
        }
    }

    /// Prove handler for learning: runs every pending incremental step and
    /// emits the signed learning proof over the chain-final model digest.
    pub fn on_prove_learning(
        &mut self,
        c_digest: &[u8; 32],
        kind: StepKind,
    ) -> Result<(LearnProof, Vec<StepTiming>), ProtocolError> {
        let (proof, timings) = self.enclave.prove_learning(&mut self.stores, c_digest, kind)?;
        if let Some(chan) = &mut self.audit_channel {
            // Observations queue in call order; the orchestrator relays them
            // to the auditor after each protocol step.
            let observed = chan.wrap(CallPayload::Learn(proof.clone()));
            self.pending_observations.push(observed);
        }
        Ok((proof, timings))
    }

    /// Prove handler for prediction against a claimed model digest.
    pub fn on_prove_prediction(
        &mut self,
        test: &[f32],
        h_model: &[u8; 32],
    ) -> Result<PredictProof, ProtocolError> {
        let proof = self.enclave.prove_prediction(&self.stores, test, h_model)?;
        if let Some(chan) = &mut self.audit_channel {
            let observed = chan.wrap(CallPayload::Predict(proof.clone()));
            self.pending_observations.push(observed);
        }
        Ok(proof)
    }

    /// Attested membership query for a (kid, data, owner) triple.
    pub fn on_query_membership(
        &self,
        kid: u64,
        data: &[u8],
        owner: Option<u64>,
    ) -> Result<MembershipProof, ProtocolError> {
        Ok(self.enclave.query_membership(kid, data, owner)?)
    }

    /// Observations queued for the auditor since the last drain.
    pub fn drain_observations(&mut self) -> Vec<ObservedCall> {
        std::mem::take(&mut self.pending_observations)
    }

    /// Checked restore of one submodel's canonical bytes.
    pub fn submodel_bytes(&self, shard: usize, slice: usize) -> Result<Vec<u8>, ProtocolError> {
        Ok(self.enclave.submodel_bytes(&self.stores, shard, slice)?)
    }

    /// Model-store handle currently linked for (shard, slice).
    pub fn submodel_handle(&self, shard: usize, slice: usize) -> Result<Option<u64>, ProtocolError> {
        Ok(self.enclave.submodel_handle(shard, slice)?)
    }
}

/// The data owner's verifier. Pins `(pk, eid, programs)` at enclave
/// initialization; every assertion is one signature verification plus
/// equality checks against the pinned and most-recent state.
pub struct Verifier {
    pk: VerifyingKey,
    eid: [u8; 32],
    sid: SessionId,
    programs: ProgramSet,
    latest_h_c: Option<[u8; 32]>,
    latest_h_model: Option<[u8; 32]>,
    sig_checks: u64,
}

impl Verifier {
    pub fn new(pk: VerifyingKey, eid: [u8; 32], sid: SessionId, programs: ProgramSet) -> Self {
        Self {
            pk,
            eid,
            sid,
            programs,
            latest_h_c: None,
            latest_h_model: None,
            sig_checks: 0,
        }
    }

    /// Signature verifications performed so far; the constant-cost property
    /// asserts this grows by exactly one per assertion.
    pub fn sig_check_count(&self) -> u64 {
        self.sig_checks
    }

    /// Reloads the mutable assertion state from a persisted session.
    pub fn restore_state(
        &mut self,
        latest_h_c: Option<[u8; 32]>,
        latest_h_model: Option<[u8; 32]>,
        sig_checks: u64,
    ) {
        self.latest_h_c = latest_h_c;
        self.latest_h_model = latest_h_model;
        self.sig_checks = sig_checks;
    }

    pub fn latest_h_model(&self) -> Option<[u8; 32]> {
        self.latest_h_model
    }

    pub fn latest_h_c(&self) -> Option<[u8; 32]> {
        self.latest_h_c
    }

    fn check_sig(&mut self, payload: &[u8], sigma: &[u8; 64]) -> Result<(), Reject> {
        self.sig_checks += 1;
        self.pk
            .verify(payload, &Signature::from_bytes(sigma))
            .map_err(|_| Reject::BadSignature)
    }

    /// Asserts sigma_d over the filter and key-list state; on acceptance the
    /// receipt's digests become the verifier's current commitment view.
    pub fn verify_receipt(&mut self, receipt: &Receipt) -> Result<(), Reject> {
        if receipt.sid != self.sid {
            return Err(Reject::WrongSession);
        }
        if receipt.eid != self.eid {
            return Err(Reject::WrongEnclave);
        }
        let payload = Receipt::signing_payload(
            receipt.sid,
            &receipt.eid,
            &receipt.h_c,
            &receipt.key_list_digest,
            &self.programs.hash_of(&prog_id::PROG_C),
            &self.programs.hash_of(&prog_id::PROG_K),
        );
        self.check_sig(&payload, &receipt.sigma_d)?;
        self.latest_h_c = Some(receipt.h_c);
        Ok(())
    }

    /// Asserts sigma_m and that the proof speaks about the currently
    /// committed filter state; on acceptance the model digest becomes the
    /// expected digest for predictions.
    pub fn verify_learn(&mut self, proof: &LearnProof) -> Result<(), Reject> {
        if proof.sid != self.sid {
            return Err(Reject::WrongSession);
        }
        if proof.eid != self.eid {
            return Err(Reject::WrongEnclave);
        }
        let latest = self.latest_h_c.ok_or(Reject::NoReceiptYet)?;
        if proof.c_digest != latest {
            return Err(Reject::FilterDigestMismatch);
        }
        let payload = LearnProof::signing_payload(
            proof.sid,
            &proof.eid,
            &proof.c_digest,
            &proof.h_model,
            &self.programs.hash_of(&prog_id::PROG_T),
        );
        self.check_sig(&payload, &proof.sigma_m)?;
        self.latest_h_model = Some(proof.h_model);
        Ok(())
    }

    /// Asserts sigma_p, that the prediction binds the challenge actually
    /// sent, and that it used the most recent proven model.
    pub fn verify_predict(
        &mut self,
        proof: &PredictProof,
        expected_test: &[f32],
    ) -> Result<(), Reject> {
        if proof.sid != self.sid {
            return Err(Reject::WrongSession);
        }
        if proof.eid != self.eid {
            return Err(Reject::WrongEnclave);
        }
        let expected_h_model = self.latest_h_model.ok_or(Reject::NoLearnProofYet)?;
        if proof.h_model != expected_h_model {
            return Err(Reject::ModelDigestMismatch);
        }
        if proof.test != expected_test {
            return Err(Reject::WrongChallenge);
        }
        let payload = PredictProof::signing_payload(
            proof.sid,
            &proof.eid,
            &proof.prediction,
            &proof.test,
            &proof.h_model,
            &self.programs.hash_of(&prog_id::PROG_P),
        );
        self.check_sig(&payload, &proof.sigma_p)
    }

    /// Asserts an attested membership answer against the current filter
    /// commitment and the expected presence bit.
    pub fn verify_membership(
        &mut self,
        proof: &MembershipProof,
        expect_present: bool,
    ) -> Result<(), Reject> {
        if proof.sid != self.sid {
            return Err(Reject::WrongSession);
        }
        if proof.eid != self.eid {
            return Err(Reject::WrongEnclave);
        }
        let latest = self.latest_h_c.ok_or(Reject::NoReceiptYet)?;
        if proof.c_digest != latest {
            return Err(Reject::FilterDigestMismatch);
        }
        if proof.present != expect_present {
            return Err(Reject::UnexpectedMembership);
        }
        let payload = MembershipProof::signing_payload(
            proof.sid,
            &proof.eid,
            proof.kid,
            proof.present,
            &proof.c_digest,
        );
        self.check_sig(&payload, &proof.sigma)
    }
}

/// One protocol message as persisted in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum TranscriptRecord {
    Receipt(Receipt),
    Learn(LearnProof),
    Predict(PredictProof),
    Member(MembershipProof),
}

/// Ordered protocol transcript; independently verifiable offline.
#[derive(Debug, Default)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TranscriptRecord) {
        self.records.push(record);
    }

    /// Writes line-delimited JSON records.
    pub fn save(&self, path: &Path) -> Result<(), ProtocolError> {
        let mut f = File::create(path)?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| ProtocolError::BadTranscript(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let f = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| ProtocolError::BadTranscript(e.to_string()))?,
            );
        }
        Ok(Self { records })
    }
}

/// Replays a transcript through a fresh verifier: receipts and learning
/// proofs in order, predictions against their own recorded challenge, and
/// membership answers against the then-current filter digest. Returns the
/// number of verified records.
pub fn verify_transcript(
    pk: VerifyingKey,
    eid: [u8; 32],
    sid: SessionId,
    programs: ProgramSet,
    transcript: &Transcript,
) -> Result<usize, ProtocolError> {
    let mut verifier = Verifier::new(pk, eid, sid, programs);
    for record in &transcript.records {
        let outcome = match record {
            TranscriptRecord::Receipt(r) => verifier.verify_receipt(r),
            TranscriptRecord::Learn(p) => verifier.verify_learn(p),
            TranscriptRecord::Predict(p) => {
                let expected = p.test.clone();
                verifier.verify_predict(p, &expected)
            }
            TranscriptRecord::Member(m) => verifier.verify_membership(m, m.present),
        };
        outcome.map_err(ProtocolError::Rejected)?;
    }
    Ok(transcript.records.len())
}

/// Everything a finished phase hands back to the caller.
#[derive(Debug)]
pub struct PhaseOutcome {
    pub receipts: Vec<Receipt>,
    pub learn: LearnProof,
    pub predict: PredictProof,
    pub memberships: Vec<MembershipProof>,
    pub timings: Vec<StepTiming>,
}

/// A deletion request: the kids to forget and, in multi-owner mode, who is
/// asking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub kids: Vec<u64>,
    pub requester: Option<u64>,
}

/// Commits a batch of points in plan order, verifying each receipt. Used by
/// `setup_phase`; multi-owner flows call it per owner to check intermediate
/// receipts.
pub fn commit_points(
    server: &mut Server,
    verifier: &mut Verifier,
    points: &[DataPoint],
    transcript: &mut Transcript,
) -> Result<Vec<Receipt>, ProtocolError> {
    let plan = server.plan.clone().ok_or(ProtocolError::NoDataset)?;
    let mut receipts = Vec::new();
    for (j, shard_slices) in plan.slices.iter().enumerate() {
        for slice in shard_slices {
            for &idx in slice {
                let point = &points[idx as usize];
                let receipt = server.on_commit_add(j, point)?;
                verifier.verify_receipt(&receipt).map_err(ProtocolError::Rejected)?;
                transcript.push(TranscriptRecord::Receipt(receipt.clone()));
                receipts.push(receipt);
            }
        }
    }
    Ok(receipts)
}

/// Setup phase: S1 commit the dataset and learn the chain, S2 take the
/// owner's challenge, S3 prove the prediction, S4 verify everything.
pub fn setup_phase(
    server: &mut Server,
    verifier: &mut Verifier,
    points: &[DataPoint],
    challenge: &[f32],
    transcript: &mut Transcript,
) -> Result<PhaseOutcome, ProtocolError> {
    server.init_session(points)?;
    let receipts = commit_points(server, verifier, points, transcript)?;

    let c_digest = server.filter_digest()?;
    let (learn, timings) = server.on_prove_learning(&c_digest, StepKind::Learn)?;
    verifier.verify_learn(&learn).map_err(ProtocolError::Rejected)?;
    transcript.push(TranscriptRecord::Learn(learn.clone()));

    let predict = server.on_prove_prediction(challenge, &learn.h_model)?;
    verifier.verify_predict(&predict, challenge).map_err(ProtocolError::Rejected)?;
    transcript.push(TranscriptRecord::Predict(predict.clone()));

    Ok(PhaseOutcome { receipts, learn, predict, memberships: Vec::new(), timings })
}

/// Deletion phase: D1 commit the deletions (foremost kid first) and retrain
/// the affected suffixes once, D2 take a fresh challenge, D3 prove, D4
/// verify — including attested absence of every deleted fingerprint.
pub fn deletion_phase(
    server: &mut Server,
    verifier: &mut Verifier,
    points: &[DataPoint],
    request: &DeletionRequest,
    challenge: &[f32],
    transcript: &mut Transcript,
) -> Result<PhaseOutcome, ProtocolError> {
    let by_kid: HashMap<u64, &DataPoint> = points.iter().map(|p| (p.kid, p)).collect();

    // Batch deletions run foremost-first so each affected submodel is
    // retrained exactly once, by the single prove_learning that follows.
    let mut ordered = request.kids.clone();
    let mut keyed: Vec<(usize, usize, usize, u64)> = Vec::with_capacity(ordered.len());
    for kid in ordered.drain(..) {
        let (j, i, p) = server.locate(kid)?;
        keyed.push((j, i, p, kid));
    }
    keyed.sort_unstable();

    let mut receipts = Vec::new();
    for &(_, _, _, kid) in &keyed {
        let (_invalidated, receipt) = server.on_commit_del(kid, request.requester)?;
        verifier.verify_receipt(&receipt).map_err(ProtocolError::Rejected)?;
        transcript.push(TranscriptRecord::Receipt(receipt.clone()));
        receipts.push(receipt);
    }

    let c_digest = server.filter_digest()?;
    let (learn, timings) = server.on_prove_learning(&c_digest, StepKind::Unlearn)?;
    verifier.verify_learn(&learn).map_err(ProtocolError::Rejected)?;
    transcript.push(TranscriptRecord::Learn(learn.clone()));

    // Attested absence of each deleted fingerprint under the new receipt.
    let mut memberships = Vec::new();
    for &(_, _, _, kid) in &keyed {
        let point = by_kid.get(&kid).ok_or(ProtocolError::UnknownKid(kid))?;
        let proof = server.on_query_membership(kid, &point.record_bytes(), point.owner)?;
        verifier.verify_membership(&proof, false).map_err(ProtocolError::Rejected)?;
        transcript.push(TranscriptRecord::Member(proof.clone()));
        memberships.push(proof);
    }

    let predict = server.on_prove_prediction(challenge, &learn.h_model)?;
    verifier.verify_predict(&predict, challenge).map_err(ProtocolError::Rejected)?;
    transcript.push(TranscriptRecord::Predict(predict.clone()));

    Ok(PhaseOutcome { receipts, learn, predict, memberships, timings })
}
