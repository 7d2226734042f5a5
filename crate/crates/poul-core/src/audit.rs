//! Auditing enclave: a second enclave instance that watches the execution
//! enclave's proof-emitting calls, verifies each attestation against the
//! pinned key, keeps a hash-chained log of verdicts, and signs alert
//! reports on failure. The data owner then verifies one auditor signature
//! instead of every per-prediction proof.

use ed25519_dalek::{Signature, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hmac_sha256, hmac_sha256_verify, sha256, sha256_parts};
use crate::enclave::{Enclave, EnclaveError, ProgramSet};
use crate::messages::{
    hex32, hex64, prog_id, test_input_bytes, unhex32, unhex64, LearnProof, PredictProof,
    SessionId,
};

const ALERT_DOMAIN: &[u8] = b"poul.alert.v1";
const LOG_DOMAIN: &[u8] = b"poul.auditlog.v1";
const OBS_DOMAIN: &[u8] = b"poul.observe.v1";

/// The auditing program descriptor; gives the auditor its own identity.
pub fn audit_program_set() -> ProgramSet {
    ProgramSet {
        prog_k: b"poul.audit.v1: observe".to_vec(),
        prog_c: b"poul.audit.v1: verify".to_vec(),
        prog_t: b"poul.audit.v1: log".to_vec(),
        prog_p: b"poul.audit.v1: report".to_vec(),
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("no channel established")]
    NoChannel,
    #[error("channel already established")]
    ChannelExists,
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
}

/// Why an observation was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureClass {
    BadAttestation,
    StaleModelDigest,
    WrongSession,
    ChannelTamper,
    ReplayedSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject(FailureClass),
}

/// One observed execution-enclave call and its verification outcome.
/// Entries chain: `entry_digest = H(prev_digest | fields)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLogEntry {
    pub seq: u64,
    pub prog_id: [u8; 8],
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub input_digest: [u8; 32],
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub output_digest: [u8; 32],
    pub verdict: Verdict,
    pub timestamp_us: u64,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub prev_digest: [u8; 32],
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub entry_digest: [u8; 32],
}

/// Signed pointer at an offending log entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertReport {
    pub seq: u64,
    pub failure: FailureClass,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub entry_digest: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma_audit: [u8; 64],
}

/// Log slice plus a single auditor signature over the log prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedReports {
    pub entries: Vec<AuditLogEntry>,
    pub alerts: Vec<AlertReport>,
    pub log_len: u64,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub prefix_digest: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma: [u8; 64],
}

/// An execution-enclave call as relayed over the audited channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CallPayload {
    Learn(LearnProof),
    Predict(PredictProof),
}

impl CallPayload {
    fn prog(&self) -> [u8; 8] {
        match self {
            CallPayload::Learn(_) => prog_id::PROG_T,
            CallPayload::Predict(_) => prog_id::PROG_P,
        }
    }

    fn canonical(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serializes")
    }

    fn input_digest(&self) -> [u8; 32] {
        match self {
            CallPayload::Learn(p) => p.c_digest,
            CallPayload::Predict(p) => sha256(&test_input_bytes(&p.test)),
        }
    }

    fn output_digest(&self) -> [u8; 32] {
        match self {
            CallPayload::Learn(p) => p.h_model,
            CallPayload::Predict(p) => sha256(&p.prediction.canonical_bytes()),
        }
    }
}

/// One MAC'd observation in channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedCall {
    pub seq: u64,
    pub payload: CallPayload,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub mac: [u8; 32],
}

/// The execution side of the audited channel; owned by the server and used
/// to wrap each proof-emitting call.
pub struct ExecChannelEnd {
    key: [u8; 32],
    next_seq: u64,
}

impl ExecChannelEnd {
    pub fn wrap(&mut self, payload: CallPayload) -> ObservedCall {
        let seq = self.next_seq;
        self.next_seq += 1;
        let mac = observation_mac(&self.key, seq, &payload);
        ObservedCall { seq, payload, mac }
    }
}

fn observation_mac(key: &[u8; 32], seq: u64, payload: &CallPayload) -> [u8; 32] {
    hmac_sha256(key, &[OBS_DOMAIN, &seq.to_le_bytes(), &payload.canonical()])
}

fn now_us() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

/// The auditing enclave instance plus its monitoring state.
pub struct Auditor {
    enclave: Enclave,
    sid: SessionId,
    exec_pk: VerifyingKey,
    exec_eid: [u8; 32],
    exec_programs: ProgramSet,
    channel: Option<ChannelState>,
    latest_h_model: Option<[u8; 32]>,
    log: Vec<AuditLogEntry>,
    payloads: Vec<Vec<u8>>,
    alerts: Vec<AlertReport>,
    chain: [u8; 32],
}

struct ChannelState {
    key: [u8; 32],
    next_seq: u64,
}

impl Auditor {
    /// Creates the auditor with its own keys and identity, pinning the
    /// execution enclave's verification key, identity and program set.
    pub fn new(
        entropy: Option<u64>,
        sid: SessionId,
        exec_pk: VerifyingKey,
        exec_eid: [u8; 32],
        exec_programs: ProgramSet,
    ) -> Self {
        let mut enclave = Enclave::init(entropy);
        enclave.install(audit_program_set());
        Self {
            enclave,
            sid,
            exec_pk,
            exec_eid,
            exec_programs,
            channel: None,
            latest_h_model: None,
            log: Vec::new(),
            payloads: Vec::new(),
            alerts: Vec::new(),
            chain: [0u8; 32],
        }
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.enclave.public_key()
    }

    pub fn eid(&self) -> [u8; 32] {
        self.enclave.eid()
    }

    pub fn log(&self) -> &[AuditLogEntry] {
        &self.log
    }

    pub fn alerts(&self) -> &[AlertReport] {
        &self.alerts
    }

    /// Runs the authenticated key exchange with the execution enclave and
    /// returns the exec-side channel end. Both sides derive the same key;
    /// a substituted verification key aborts the exchange.
    pub fn establish_channel(
        &mut self,
        exec: &mut Enclave,
        claimed_exec_pk: &VerifyingKey,
    ) -> Result<ExecChannelEnd, AuditError> {
        if self.channel.is_some() {
            return Err(AuditError::ChannelExists);
        }
        if claimed_exec_pk != &self.exec_pk || exec.eid() != self.exec_eid {
            return Err(AuditError::Enclave(EnclaveError::BadInput(
                "execution enclave identity mismatch",
            )));
        }
        let audit_state = self.enclave.kx_start(&self.exec_eid);
        let exec_state = exec.kx_start(&self.enclave.eid());
        let audit_key = self.enclave.kx_finish(
            &audit_state,
            &Enclave::kx_message(&exec_state),
            &self.exec_pk,
        )?;
        let exec_key = exec.kx_finish(
            &exec_state,
            &Enclave::kx_message(&audit_state),
            &self.enclave.public_key(),
        )?;
        debug_assert_eq!(audit_key, exec_key);
        self.channel = Some(ChannelState { key: audit_key, next_seq: 0 });
        Ok(ExecChannelEnd { key: exec_key, next_seq: 0 })
    }

    fn append_entry(
        &mut self,
        prog: [u8; 8],
        input_digest: [u8; 32],
        output_digest: [u8; 32],
        verdict: Verdict,
        payload: Vec<u8>,
    ) -> &AuditLogEntry {
        let seq = self.log.len() as u64;
        let prev = self.chain;
        let verdict_byte: u8 = match verdict {
            Verdict::Accept => 0,
            Verdict::Reject(_) => 1,
        };
        let entry_digest = sha256_parts(&[
            &prev,
            &seq.to_le_bytes(),
            &prog,
            &input_digest,
            &output_digest,
            &[verdict_byte],
            &sha256(&payload),
        ]);
        let entry = AuditLogEntry {
            seq,
            prog_id: prog,
            input_digest,
            output_digest,
            verdict,
            timestamp_us: now_us(),
            prev_digest: prev,
            entry_digest,
        };
        self.chain = entry_digest;
        if let Verdict::Reject(failure) = verdict {
            let payload_sig = self.alert_payload(seq, failure, &entry_digest);
            let sigma_audit = self.enclave_sign(&payload_sig);
            self.alerts.push(AlertReport { seq, failure, entry_digest, sigma_audit });
        }
        self.log.push(entry);
        self.payloads.push(payload);
        self.log.last().unwrap()
    }

    fn alert_payload(&self, seq: u64, failure: FailureClass, entry_digest: &[u8; 32]) -> Vec<u8> {
        let mut p = Vec::with_capacity(128);
        p.extend_from_slice(ALERT_DOMAIN);
        p.extend_from_slice(&self.enclave.eid());
        p.extend_from_slice(&seq.to_le_bytes());
        p.push(failure as u8);
        p.extend_from_slice(entry_digest);
        p
    }

    fn enclave_sign(&self, payload: &[u8]) -> [u8; 64] {
        // The auditor signs with its own enclave key via the generic
        // attestation path; reuse the signing key through a tiny shim.
        self.enclave.sign_raw(payload)
    }

    /// Verifies one observed call and appends the verdict to the chained
    /// log. Verification failures never error out; they become reject
    /// entries plus signed alerts.
    pub fn observe_and_verify(&mut self, call: &ObservedCall) -> Result<&AuditLogEntry, AuditError> {
        let channel = self.channel.as_mut().ok_or(AuditError::NoChannel)?;
        let prog = call.payload.prog();
        let input_digest = call.payload.input_digest();
        let output_digest = call.payload.output_digest();
        let payload_bytes = call.payload.canonical();

        // Transport checks: MAC then strict sequence.
        if observation_mac(&channel.key, call.seq, &call.payload) != call.mac {
            return Ok(self.append_entry(
                prog,
                input_digest,
                output_digest,
                Verdict::Reject(FailureClass::ChannelTamper),
                payload_bytes,
            ));
        }
        if call.seq != channel.next_seq {
            return Ok(self.append_entry(
                prog,
                input_digest,
                output_digest,
                Verdict::Reject(FailureClass::ReplayedSequence),
                payload_bytes,
            ));
        }
        channel.next_seq += 1;

        let verdict = self.verify_payload_with(self.latest_h_model, &call.payload);
        if let (Verdict::Accept, CallPayload::Learn(p)) = (verdict, &call.payload) {
            self.latest_h_model = Some(p.h_model);
        }
        Ok(self.append_entry(prog, input_digest, output_digest, verdict, payload_bytes))
    }

    fn verify_payload_with(
        &self,
        latest_h_model: Option<[u8; 32]>,
        payload: &CallPayload,
    ) -> Verdict {
        match payload {
            CallPayload::Learn(p) => {
                if p.sid != self.sid || p.eid != self.exec_eid {
                    return Verdict::Reject(FailureClass::WrongSession);
                }
                let signing = LearnProof::signing_payload(
                    p.sid,
                    &p.eid,
                    &p.c_digest,
                    &p.h_model,
                    &self.exec_programs.hash_of(&prog_id::PROG_T),
                );
                if self
                    .exec_pk
                    .verify(&signing, &Signature::from_bytes(&p.sigma_m))
                    .is_err()
                {
                    return Verdict::Reject(FailureClass::BadAttestation);
                }
                Verdict::Accept
            }
            CallPayload::Predict(p) => {
                if p.sid != self.sid || p.eid != self.exec_eid {
                    return Verdict::Reject(FailureClass::WrongSession);
                }
                let signing = PredictProof::signing_payload(
                    p.sid,
                    &p.eid,
                    &p.prediction,
                    &p.test,
                    &p.h_model,
                    &self.exec_programs.hash_of(&prog_id::PROG_P),
                );
                if self
                    .exec_pk
                    .verify(&signing, &Signature::from_bytes(&p.sigma_p))
                    .is_err()
                {
                    return Verdict::Reject(FailureClass::BadAttestation);
                }
                match latest_h_model {
                    Some(h) if h == p.h_model => Verdict::Accept,
                    _ => Verdict::Reject(FailureClass::StaleModelDigest),
                }
            }
        }
    }

    /// Returns the log slice in `[from, to)` plus alerts referencing it and
    /// a single auditor signature over the whole log prefix.
    pub fn fetch_reports(&self, from: u64, to: u64) -> FetchedReports {
        let to = to.min(self.log.len() as u64);
        let from = from.min(to);
        let entries = self.log[from as usize..to as usize].to_vec();
        let alerts = self
            .alerts
            .iter()
            .filter(|a| a.seq >= from && a.seq < to)
            .cloned()
            .collect();
        let log_len = self.log.len() as u64;
        let prefix_digest = self.chain;
        let mut p = Vec::with_capacity(96);
        p.extend_from_slice(LOG_DOMAIN);
        p.extend_from_slice(&self.enclave.eid());
        p.extend_from_slice(&log_len.to_le_bytes());
        p.extend_from_slice(&prefix_digest);
        let sigma = self.enclave_sign(&p);
        FetchedReports { entries, alerts, log_len, prefix_digest, sigma }
    }

    /// Recomputes one logged verdict from the retained payload and the
    /// pinned execution key (auditor self-check / third-party replay).
    pub fn recompute_verdict(&self, seq: u64) -> Option<Verdict> {
        let payload: CallPayload = serde_json::from_slice(self.payloads.get(seq as usize)?).ok()?;
        // Transport-rejected entries keep their logged verdict.
        match self.log[seq as usize].verdict {
            v @ Verdict::Reject(FailureClass::ChannelTamper)
            | v @ Verdict::Reject(FailureClass::ReplayedSequence) => Some(v),
            _ => {
                // Replay h_model tracking over the accepted prefix.
                let mut latest = None;
                for (i, raw) in self.payloads.iter().enumerate().take(seq as usize) {
                    if let (Verdict::Accept, Ok(CallPayload::Learn(p))) = (
                        self.log[i].verdict,
                        serde_json::from_slice::<CallPayload>(raw),
                    ) {
                        latest = Some(p.h_model);
                    }
                }
                Some(self.verify_payload_with(latest, &payload))
            }
        }
    }

    /// Digest of the retained payload behind log entry `seq`.
    pub fn payload_digest(&self, seq: u64) -> Option<[u8; 32]> {
        self.payloads.get(seq as usize).map(|p| sha256(p))
    }
}

/// Verifies an alert report under the auditor's pinned key.
pub fn verify_alert(auditor_pk: &VerifyingKey, auditor_eid: &[u8; 32], alert: &AlertReport) -> bool {
    let mut p = Vec::with_capacity(128);
    p.extend_from_slice(ALERT_DOMAIN);
    p.extend_from_slice(auditor_eid);
    p.extend_from_slice(&alert.seq.to_le_bytes());
    p.push(alert.failure as u8);
    p.extend_from_slice(&alert.entry_digest);
    auditor_pk.verify(&p, &Signature::from_bytes(&alert.sigma_audit)).is_ok()
}

/// Verifies the signed log-prefix digest of a report bundle.
pub fn verify_reports(
    auditor_pk: &VerifyingKey,
    auditor_eid: &[u8; 32],
    reports: &FetchedReports,
) -> bool {
    let mut p = Vec::with_capacity(96);
    p.extend_from_slice(LOG_DOMAIN);
    p.extend_from_slice(auditor_eid);
    p.extend_from_slice(&reports.log_len.to_le_bytes());
    p.extend_from_slice(&reports.prefix_digest);
    auditor_pk.verify(&p, &Signature::from_bytes(&reports.sigma)).is_ok()
}

/// Recomputes the hash chain over a full log and checks it ends at the
/// claimed prefix digest; detects truncation or splicing when compared to a
/// previously seen (longer) digest.
pub fn verify_log_chain(entries: &[AuditLogEntry], payload_digests: &[[u8; 32]]) -> bool {
    let mut prev = [0u8; 32];
    for (entry, pd) in entries.iter().zip(payload_digests) {
        if entry.prev_digest != prev {
            return false;
        }
        let verdict_byte: u8 = match entry.verdict {
            Verdict::Accept => 0,
            Verdict::Reject(_) => 1,
        };
        let want = sha256_parts(&[
            &prev,
            &entry.seq.to_le_bytes(),
            &entry.prog_id,
            &entry.input_digest,
            &entry.output_digest,
            &[verdict_byte],
            pd,
        ]);
        if want != entry.entry_digest {
            return false;
        }
        prev = entry.entry_digest;
    }
    true
}

/// Verifies a MAC'd observation envelope (exec-side helper for tests).
pub fn verify_observation_mac(key: &[u8; 32], call: &ObservedCall) -> bool {
    hmac_sha256_verify(
        key,
        &[OBS_DOMAIN, &call.seq.to_le_bytes(), &call.payload.canonical()],
        &call.mac,
    )
}
