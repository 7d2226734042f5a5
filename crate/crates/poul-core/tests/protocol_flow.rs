//! End-to-end protocol flows: honest setup/deletion transcripts, the
//! integrity-attack rejections, multi-owner commits, the auditing enclave,
//! and offline transcript verification.

use rand_chacha::rand_core::RngCore;

use poul_core::audit::{
    verify_alert, verify_log_chain, verify_reports, Auditor, FailureClass, Verdict,
};
use poul_core::crypto::chacha_from_u64;
use poul_core::filter::FilterConfig;
use poul_core::messages::SessionId;
use poul_core::ml::{Dims, Hyperparams};
use poul_core::protocol::{
    commit_points, deletion_phase, setup_phase, verify_transcript, DeletionRequest, ProtocolError,
    Reject, Server, SessionConfig, Transcript, TranscriptRecord, Verifier,
};
use poul_core::sisa::{DataPoint, StepKind};

fn gen_points(n: usize, dim: usize, seed: u64) -> Vec<DataPoint> {
    let mut rng = chacha_from_u64(seed);
    (0..n)
        .map(|_| {
            let features: Vec<f32> =
                (0..dim).map(|_| (rng.next_u32() >> 8) as f32 / 16_777_216.0).collect();
            DataPoint::new(features, rng.next_u32() % 2)
        })
        .collect()
}

fn cfg(sid: u64, n_shards: usize, n_slices: usize, seed: u64) -> SessionConfig {
    SessionConfig {
        sid: SessionId(sid),
        dims: Dims::new(20, 8, 2),
        hp: Hyperparams { batch_size: 12, epochs: 2, learning_rate: 0.2, rng_seed: seed },
        n_shards,
        n_slices,
        m0_seed: seed ^ 1,
        plan_seed: seed ^ 2,
        filter: FilterConfig { bucket_count: 1 << 10, ..FilterConfig::default() },
    }
}

struct Session {
    server: Server,
    verifier: Verifier,
    points: Vec<DataPoint>,
    transcript: Transcript,
    challenge: Vec<f32>,
}

fn honest_setup(sid: u64, n_shards: usize, n_slices: usize, n_points: usize, seed: u64) -> Session {
    let cfg = cfg(sid, n_shards, n_slices, seed);
    let points = gen_points(n_points, cfg.dims.input, seed ^ 0xF00);
    let mut server = Server::new(cfg.clone(), Some(seed ^ 0xE));
    let mut verifier =
        Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
    let mut transcript = Transcript::new();
    let challenge: Vec<f32> = points[0].features.clone();
    setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript).unwrap();
    Session { server, verifier, points, transcript, challenge }
}

#[test]
fn honest_setup_and_deletion_accept_everywhere() {
    let mut s = honest_setup(1, 2, 3, 120, 7);
    let victim = s.points[5].kid;
    let request = DeletionRequest { kids: vec![victim], requester: None };
    let outcome = deletion_phase(
        &mut s.server,
        &mut s.verifier,
        &s.points,
        &request,
        &s.challenge,
        &mut s.transcript,
    )
    .unwrap();
    // Deleted fingerprint attested absent under the new receipt.
    assert_eq!(outcome.memberships.len(), 1);
    assert!(!outcome.memberships[0].present);

    // Offline replay of the whole transcript accepts every record.
    let n = verify_transcript(
        s.server.public_key(),
        s.server.eid(),
        SessionId(1),
        s.server.programs(),
        &s.transcript,
    )
    .unwrap();
    assert_eq!(n, s.transcript.records.len());
}

#[test]
fn verification_cost_is_constant_per_assertion() {
    for n_slices in [1usize, 3, 6, 12] {
        let cfg = cfg(2, 1, n_slices, 11);
        let points = gen_points(96, cfg.dims.input, 13);
        let mut server = Server::new(cfg.clone(), Some(3));
        let mut verifier =
            Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
        let mut transcript = Transcript::new();
        let challenge: Vec<f32> = points[0].features.clone();
        setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript).unwrap();

        // One learn proof + one predict proof: exactly one signature check
        // each, independent of slice count.
        let before = verifier.sig_check_count();
        let c = server.filter_digest().unwrap();
        let (learn, _) = server.on_prove_learning(&c, StepKind::Learn).unwrap();
        verifier.verify_learn(&learn).unwrap();
        assert_eq!(verifier.sig_check_count() - before, 1, "verify_learn at s={n_slices}");

        let before = verifier.sig_check_count();
        let predict = server.on_prove_prediction(&challenge, &learn.h_model).unwrap();
        verifier.verify_predict(&predict, &challenge).unwrap();
        assert_eq!(verifier.sig_check_count() - before, 1, "verify_predict at s={n_slices}");
    }
}

#[test]
fn forged_model_attack_is_rejected() {
    let mut s = honest_setup(3, 1, 3, 90, 17);
    let last = s.server.config().n_slices - 1;
    let handle = s.server.submodel_handle(0, last).unwrap().unwrap();

    // The server swaps in a different (well-formed) model blob.
    let honest_learn = match s.transcript.records.iter().rev().find(|r| matches!(r, TranscriptRecord::Learn(_))) {
        Some(TranscriptRecord::Learn(p)) => p.clone(),
        _ => unreachable!(),
    };
    let forged = poul_core::ml::init_model(s.server.config().dims, 999).unwrap();
    s.server.stores.models.get_mut(handle).unwrap().model = forged.canonical_bytes();

    // The enclave refuses to produce a prediction proof at all.
    let err = s.server.on_prove_prediction(&s.challenge, &honest_learn.h_model).unwrap_err();
    assert!(matches!(err, ProtocolError::Enclave(_)), "got {err:?}");

    // A self-made proof with a mismatched digest fails verification.
    let mut bogus = honest_learn.clone();
    bogus.h_model[0] ^= 1;
    assert_eq!(s.verifier.verify_learn(&bogus).unwrap_err(), Reject::BadSignature);
}

#[test]
fn fork_attack_second_instance_rejected_by_pinned_key() {
    let s = honest_setup(4, 1, 3, 90, 19);

    // Second enclave instance, same programs (same eid), fresh keys runs the
    // whole protocol honestly on the same data.
    let cfg = s.server.config().clone();
    let mut fork = Server::new(cfg.clone(), Some(777));
    assert_eq!(fork.eid(), s.server.eid(), "same programs, same identity");
    assert_ne!(fork.public_key().to_bytes(), s.server.public_key().to_bytes());
    let mut fork_verifier =
        Verifier::new(fork.public_key(), fork.eid(), cfg.sid, fork.programs());
    let mut fork_transcript = Transcript::new();
    setup_phase(&mut fork, &mut fork_verifier, &s.points, &s.challenge, &mut fork_transcript)
        .unwrap();

    // The owner's verifier is pinned to the original pk: every forked
    // message is rejected.
    let mut pinned =
        Verifier::new(s.server.public_key(), s.server.eid(), cfg.sid, s.server.programs());
    for record in &fork_transcript.records {
        let rejected = match record {
            TranscriptRecord::Receipt(r) => pinned.verify_receipt(r).is_err(),
            TranscriptRecord::Learn(p) => pinned.verify_learn(p).is_err(),
            TranscriptRecord::Predict(p) => pinned.verify_predict(p, &p.test.clone()).is_err(),
            TranscriptRecord::Member(m) => pinned.verify_membership(m, m.present).is_err(),
        };
        assert!(rejected, "forked record accepted: {record:?}");
    }
}

#[test]
fn stale_proof_replay_after_deletion_rejected() {
    let mut s = honest_setup(5, 1, 3, 90, 23);
    let stale_predict = match s.transcript.records.iter().rev().find(|r| matches!(r, TranscriptRecord::Predict(_))) {
        Some(TranscriptRecord::Predict(p)) => p.clone(),
        _ => unreachable!(),
    };

    let request = DeletionRequest { kids: vec![s.points[7].kid], requester: None };
    deletion_phase(
        &mut s.server,
        &mut s.verifier,
        &s.points,
        &request,
        &s.challenge,
        &mut s.transcript,
    )
    .unwrap();

    // Replaying the pre-deletion prediction proof: stale h_model.
    assert_eq!(
        s.verifier.verify_predict(&stale_predict, &s.challenge).unwrap_err(),
        Reject::ModelDigestMismatch
    );

    // Forged-unlearning: reusing the old learn proof fails because it binds
    // the pre-deletion filter digest.
    let stale_learn = match s.transcript.records.iter().find(|r| matches!(r, TranscriptRecord::Learn(_))) {
        Some(TranscriptRecord::Learn(p)) => p.clone(),
        _ => unreachable!(),
    };
    assert_eq!(s.verifier.verify_learn(&stale_learn).unwrap_err(), Reject::FilterDigestMismatch);
}

#[test]
fn cross_session_replay_rejected() {
    let s1 = honest_setup(6, 1, 2, 60, 29);
    let s2 = honest_setup(7, 1, 2, 60, 29);
    // Same everything except sid; proofs cannot cross sessions.
    let learn_from_1 = match s1.transcript.records.iter().find(|r| matches!(r, TranscriptRecord::Learn(_))) {
        Some(TranscriptRecord::Learn(p)) => p.clone(),
        _ => unreachable!(),
    };
    let mut v2 = Verifier::new(
        s2.server.public_key(),
        s2.server.eid(),
        SessionId(7),
        s2.server.programs(),
    );
    assert_eq!(v2.verify_receipt(&s1.transcript_first_receipt()).unwrap_err(), Reject::WrongSession);
    assert_eq!(v2.verify_learn(&learn_from_1).unwrap_err(), Reject::WrongSession);
}

impl Session {
    fn transcript_first_receipt(&self) -> poul_core::messages::Receipt {
        match self.transcript.records.iter().find(|r| matches!(r, TranscriptRecord::Receipt(_))) {
            Some(TranscriptRecord::Receipt(r)) => r.clone(),
            _ => unreachable!(),
        }
    }
}

#[test]
fn stale_commitment_digest_rejected_by_enclave() {
    let mut s = honest_setup(8, 1, 3, 90, 31);
    let old_digest = s.server.filter_digest().unwrap();
    // Move the filter state with a deletion commit.
    s.server.on_commit_del(s.points[3].kid, None).unwrap();
    let err = s.server.on_prove_learning(&old_digest, StepKind::Unlearn).unwrap_err();
    assert!(matches!(
        err,
        ProtocolError::Enclave(poul_core::enclave::EnclaveError::StaleCommitment)
    ));
}

#[test]
fn data_tamper_halts_retraining() {
    let mut s = honest_setup(9, 1, 3, 90, 37);
    // Corrupt one stored record, then force a full-prefix retrain by
    // deleting a slice-0 point.
    s.server.stores.data.records[10].data[2] ^= 0x40;
    let plan = s.server.plan().unwrap().clone();
    let victim = s.points[plan.slices[0][0][0] as usize].kid;
    let request = DeletionRequest { kids: vec![victim], requester: None };
    let err = deletion_phase(
        &mut s.server,
        &mut s.verifier,
        &s.points,
        &request,
        &s.challenge,
        &mut s.transcript,
    )
    .unwrap_err();
    assert!(format!("{err}").contains("replacing attack"), "got {err}");
}

#[test]
fn multi_owner_commits_and_authorization() {
    let cfg = cfg(20, 1, 2, 41);
    // Two owners share identical raw data; kids must differ and both insert.
    let mut rng = chacha_from_u64(99);
    let shared: Vec<f32> =
        (0..cfg.dims.input).map(|_| (rng.next_u32() >> 8) as f32 / 16_777_216.0).collect();
    let mut points = Vec::new();
    for i in 0..30 {
        let features: Vec<f32> =
            (0..cfg.dims.input).map(|_| (rng.next_u32() >> 8) as f32 / 16_777_216.0).collect();
        let owner = if i % 2 == 0 { 1 } else { 2 };
        points.push(DataPoint::with_owner(owner, features, (i % 2) as u32));
    }
    let dup1 = DataPoint::with_owner(1, shared.clone(), 1);
    let dup2 = DataPoint::with_owner(2, shared.clone(), 1);
    assert_ne!(dup1.kid, dup2.kid, "owner-qualified kids must differ");
    points.push(dup1.clone());
    points.push(dup2.clone());

    let mut server = Server::new(cfg.clone(), Some(43));
    let mut verifier =
        Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
    let mut transcript = Transcript::new();
    server.init_session(&points).unwrap();
    let receipts = commit_points(&mut server, &mut verifier, &points, &mut transcript).unwrap();
    assert_eq!(receipts.len(), points.len());

    // Owner 2 verifying the filter state after their upload: any receipt
    // verifies under the pinned key (they check the latest one they saw).
    let mut owner2 =
        Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
    owner2.verify_receipt(receipts.last().unwrap()).unwrap();

    // Owner 1 cannot delete owner 2's data.
    let err = server.on_commit_del(dup2.kid, Some(1)).unwrap_err();
    assert!(matches!(
        err,
        ProtocolError::Enclave(poul_core::enclave::EnclaveError::Unauthorized(_))
    ));
    // The rightful owner can.
    server.on_commit_del(dup2.kid, Some(2)).unwrap();
    // Owner 1's copy of the same raw data is still committed.
    let proof = server.on_query_membership(dup1.kid, &dup1.record_bytes(), dup1.owner).unwrap();
    assert!(proof.present);
}

#[test]
fn transcript_files_roundtrip_and_detect_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = honest_setup(21, 1, 3, 90, 47);
    let request = DeletionRequest { kids: vec![s.points[4].kid], requester: None };
    deletion_phase(
        &mut s.server,
        &mut s.verifier,
        &s.points,
        &request,
        &s.challenge,
        &mut s.transcript,
    )
    .unwrap();

    let path = dir.path().join("transcript.jsonl");
    s.transcript.save(&path).unwrap();
    let loaded = Transcript::load(&path).unwrap();
    assert_eq!(loaded.records, s.transcript.records);
    verify_transcript(
        s.server.public_key(),
        s.server.eid(),
        SessionId(21),
        s.server.programs(),
        &loaded,
    )
    .unwrap();

    // Flip one hex digit of a signature inside the file: replay rejects.
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"sigma_d\":\"a", "\"sigma_d\":\"b", 1);
    let tampered = if tampered == text {
        text.replacen("\"sigma_d\":\"b", "\"sigma_d\":\"a", 1)
    } else {
        tampered
    };
    assert_ne!(tampered, text, "could not tamper a signature");
    std::fs::write(&path, tampered).unwrap();
    let bad = Transcript::load(&path).unwrap();
    assert!(verify_transcript(
        s.server.public_key(),
        s.server.eid(),
        SessionId(21),
        s.server.programs(),
        &bad,
    )
    .is_err());
}

#[test]
fn auditor_accepts_honest_session_and_flags_stale_predictions() {
    let cfg = cfg(30, 1, 3, 53);
    let points = gen_points(90, cfg.dims.input, 54);
    let mut server = Server::new(cfg.clone(), Some(55));
    let mut verifier =
        Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
    let mut auditor = Auditor::new(
        Some(56),
        cfg.sid,
        server.public_key(),
        server.eid(),
        server.programs(),
    );
    let exec_pk = server.public_key();
    let chan = auditor.establish_channel(server.enclave_mut(), &exec_pk).unwrap();
    server.set_audit_channel(chan);

    let mut transcript = Transcript::new();
    let challenge: Vec<f32> = points[0].features.clone();
    setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript).unwrap();
    for call in server.drain_observations() {
        let entry = auditor.observe_and_verify(&call).unwrap();
        assert_eq!(entry.verdict, Verdict::Accept);
    }

    // 100 honest predictions: 100 accepting entries, zero alerts.
    let h_model = verifier.latest_h_model().unwrap();
    for i in 0..100 {
        let t: Vec<f32> = points[1 + (i % 80)].features.clone();
        let proof = server.on_prove_prediction(&t, &h_model).unwrap();
        verifier.verify_predict(&proof, &t).unwrap();
    }
    let mut accepted = 0usize;
    for call in server.drain_observations() {
        assert_eq!(auditor.observe_and_verify(&call).unwrap().verdict, Verdict::Accept);
        accepted += 1;
    }
    assert_eq!(accepted, 100);
    assert!(auditor.alerts().is_empty());

    // Delete, retrain honestly, but replay a stale prediction proof to the
    // auditor: exactly one alert referencing that entry.
    let stale = {
        let proof = server.on_prove_prediction(&challenge, &h_model).unwrap();
        for call in server.drain_observations() {
            assert_eq!(auditor.observe_and_verify(&call).unwrap().verdict, Verdict::Accept);
        }
        proof
    };
    let request = DeletionRequest { kids: vec![points[2].kid], requester: None };
    deletion_phase(&mut server, &mut verifier, &points, &request, &challenge, &mut transcript)
        .unwrap();
    for call in server.drain_observations() {
        auditor.observe_and_verify(&call).unwrap();
    }
    let alerts_before = auditor.alerts().len();

    // The server tries to serve the stale proof as a fresh observation,
    // wrapping it through its own channel end for a valid MAC and sequence.
    let mut replay_chan_call = {
        use poul_core::audit::CallPayload;
        let chan = server.audit_channel_mut().unwrap();
        chan.wrap(CallPayload::Predict(stale))
    };
    let entry = auditor.observe_and_verify(&replay_chan_call).unwrap().clone();
    assert_eq!(entry.verdict, Verdict::Reject(FailureClass::StaleModelDigest));
    assert_eq!(auditor.alerts().len(), alerts_before + 1);
    let alert = auditor.alerts().last().unwrap();
    assert_eq!(alert.seq, entry.seq);
    assert!(verify_alert(&auditor.public_key(), &auditor.eid(), alert));

    // Replaying the same sequence number is rejected.
    replay_chan_call.seq = 0;
    let entry = auditor.observe_and_verify(&replay_chan_call).unwrap();
    assert!(matches!(
        entry.verdict,
        Verdict::Reject(FailureClass::ReplayedSequence) | Verdict::Reject(FailureClass::ChannelTamper)
    ));

    // Reports: signed digest verifies; the log chain recomputes; verdicts
    // are reproducible from retained payloads.
    let reports = auditor.fetch_reports(0, u64::MAX);
    assert!(verify_reports(&auditor.public_key(), &auditor.eid(), &reports));
    let digests: Vec<[u8; 32]> =
        (0..reports.entries.len() as u64).map(|i| auditor.payload_digest(i).unwrap()).collect();
    assert!(verify_log_chain(&reports.entries, &digests));
    for e in &reports.entries {
        assert_eq!(auditor.recompute_verdict(e.seq).unwrap(), e.verdict);
    }

    // Truncation: dropping the tail changes the chain head against the
    // previously signed prefix digest.
    let truncated = &reports.entries[..reports.entries.len() - 1];
    assert_ne!(truncated.last().unwrap().entry_digest, reports.prefix_digest);
}

#[test]
fn generic_resume_serves_predictions_with_attestations() {
    let mut s = honest_setup(32, 1, 3, 90, 67);
    let h_model = s.verifier.latest_h_model().unwrap();

    // prog_p through the generic resume surface: digest then the test
    // input, little-endian f32s.
    let mut input = h_model.to_vec();
    for v in &s.challenge {
        input.extend_from_slice(&v.to_le_bytes());
    }
    let pk = s.server.public_key();
    let stores = std::mem::take(&mut s.server.stores);
    let mut stores = stores;
    let (output, att) = s
        .server
        .enclave_mut()
        .resume(&mut stores, poul_core::messages::prog_id::PROG_P, &input)
        .unwrap();
    s.server.stores = stores;
    assert!(poul_core::enclave::verify_attestation(&pk, &att));
    assert_eq!(att.prog_id, poul_core::messages::prog_id::PROG_P);
    // The output is the canonical prediction encoding; it matches a direct
    // prove_prediction on the same challenge.
    let direct = s.server.on_prove_prediction(&s.challenge, &h_model).unwrap();
    assert_eq!(output, direct.prediction.canonical_bytes());

    // Tampered attestation bytes fail verification.
    let mut bad = att.clone();
    bad.sigma[0] ^= 1;
    assert!(!poul_core::enclave::verify_attestation(&pk, &bad));
}

#[test]
fn membership_is_exact_for_known_kids_and_approximate_otherwise() {
    let mut s = honest_setup(33, 1, 2, 60, 71);
    let point = s.points[4].clone();
    let proof = s.server.on_query_membership(point.kid, &point.record_bytes(), None).unwrap();
    assert!(proof.present);

    s.server.on_commit_del(point.kid, None).unwrap();
    let proof = s.server.on_query_membership(point.kid, &point.record_bytes(), None).unwrap();
    assert!(!proof.present, "tag answers exactly for deleted kids");

    // A kid never committed answers through the filter (almost always
    // absent at this load).
    let foreign = DataPoint::new(vec![0.123; 20], 1);
    let proof =
        s.server.on_query_membership(foreign.kid, &foreign.record_bytes(), None).unwrap();
    assert!(!proof.present);
}

#[test]
fn auditor_channel_rejects_substituted_key() {
    let cfg = cfg(31, 1, 2, 61);
    let mut server = Server::new(cfg.clone(), Some(62));
    let mut auditor = Auditor::new(
        Some(63),
        cfg.sid,
        server.public_key(),
        server.eid(),
        server.programs(),
    );
    // Man in the middle presents its own key as the execution enclave's.
    let mitm = Server::new(cfg.clone(), Some(64));
    let err = auditor.establish_channel(server.enclave_mut(), &mitm.public_key());
    assert!(err.is_err());
}
