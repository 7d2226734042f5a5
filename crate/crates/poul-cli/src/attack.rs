//! Integrity-attack simulator: runs each tamper strategy against fresh
//! randomized sessions and counts rejections. Every strategy must be
//! rejected in every trial; any accepted attack is reported as a failure.

use serde::Serialize;

use poul_core::crypto::mix64;
use poul_core::filter::FilterConfig;
use poul_core::messages::SessionId;
use poul_core::ml::{self, Dims, Hyperparams};
use poul_core::protocol::{
    deletion_phase, setup_phase, DeletionRequest, Server, SessionConfig, Transcript,
    TranscriptRecord, Verifier,
};
use poul_core::sisa::DataPoint;

use crate::bench::random_points;

/// The simulated tamper strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    ForgedModel,
    ForkInstance,
    ReplaceData,
    RelocateSubmodel,
    RollbackSubmodel,
    StaleProofReplay,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::ForgedModel,
        Strategy::ForkInstance,
        Strategy::ReplaceData,
        Strategy::RelocateSubmodel,
        Strategy::RollbackSubmodel,
        Strategy::StaleProofReplay,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ForgedModel => "forged-model",
            Strategy::ForkInstance => "fork-instance",
            Strategy::ReplaceData => "replace-data",
            Strategy::RelocateSubmodel => "relocate-submodel",
            Strategy::RollbackSubmodel => "rollback-submodel",
            Strategy::StaleProofReplay => "stale-proof-replay",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub strategy: &'static str,
    pub trials: usize,
    pub rejected: usize,
    pub detection_rate: f64,
    /// The generous analytical bound the detection rate is compared to for
    /// the data-replacement strategy (MAC catches are deterministic; the
    /// filter backstop alone would detect with 1 - FPR).
    pub fpr_bound: f64,
}

struct Trial {
    server: Server,
    verifier: Verifier,
    points: Vec<DataPoint>,
    challenge: Vec<f32>,
    transcript: Transcript,
    cfg: SessionConfig,
}

fn fresh_trial(seed: u64) -> Trial {
    let n_slices = 2 + (mix64(seed, 1) % 3) as usize; // 2..=4
    let cfg = SessionConfig {
        sid: SessionId(seed),
        dims: Dims::new(12, 5, 2),
        hp: Hyperparams {
            batch_size: 8,
            epochs: 1,
            learning_rate: 0.2,
            rng_seed: mix64(seed, 2),
        },
        n_shards: 1,
        n_slices,
        m0_seed: mix64(seed, 3),
        plan_seed: mix64(seed, 4),
        filter: FilterConfig { bucket_count: 1 << 9, ..FilterConfig::default() },
    };
    let n_points = 36 + (mix64(seed, 5) % 24) as usize;
    let points = random_points(n_points, cfg.dims.input, mix64(seed, 6));
    let mut server = Server::new(cfg.clone(), Some(mix64(seed, 7)));
    let mut verifier =
        Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
    let mut transcript = Transcript::new();
    let challenge = points[0].features.clone();
    setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript)
        .expect("honest setup");
    Trial { server, verifier, points, challenge, transcript, cfg }
}

fn last_learn(transcript: &Transcript) -> poul_core::messages::LearnProof {
    transcript
        .records
        .iter()
        .rev()
        .find_map(|r| match r {
            TranscriptRecord::Learn(p) => Some(p.clone()),
            _ => None,
        })
        .expect("setup produced a learn proof")
}

/// Runs one trial of one strategy; `true` means the attack was rejected.
fn run_trial(strategy: Strategy, seed: u64) -> bool {
    let mut t = fresh_trial(seed);
    let final_slice = t.cfg.n_slices - 1;
    match strategy {
        Strategy::ForgedModel => {
            // Substitute a different trained model for the final submodel
            // and try to serve a prediction bound to the honest digest.
            let learn = last_learn(&t.transcript);
            let handle = t.server.submodel_handle(0, final_slice).unwrap().unwrap();
            let forged = ml::init_model(t.cfg.dims, mix64(seed, 100)).unwrap();
            let mut bytes = forged.canonical_bytes();
            // Keep a plausible slice index so only the weights are forged.
            let len = bytes.len();
            bytes[len - 8..].copy_from_slice(&((final_slice + 1) as u64).to_le_bytes());
            t.server.stores.models.get_mut(handle).unwrap().model = bytes;
            t.server.on_prove_prediction(&t.challenge, &learn.h_model).is_err()
        }
        Strategy::ForkInstance => {
            // A second enclave instance with the same programs answers the
            // challenge; the verifier is pinned to the original key.
            let mut fork = Server::new(t.cfg.clone(), Some(mix64(seed, 101)));
            let mut fork_verifier =
                Verifier::new(fork.public_key(), fork.eid(), t.cfg.sid, fork.programs());
            let mut fork_transcript = Transcript::new();
            let outcome = setup_phase(
                &mut fork,
                &mut fork_verifier,
                &t.points,
                &t.challenge,
                &mut fork_transcript,
            )
            .expect("fork runs honestly under its own key");
            t.verifier.verify_predict(&outcome.predict, &t.challenge).is_err()
        }
        Strategy::ReplaceData => {
            // Corrupt one stored data record, then force a full retrain by
            // deleting a slice-0 point (so the tampered record gets fetched).
            let plan = t.server.plan().unwrap().clone();
            let victim_idx = plan.slices[0][0][0] as usize;
            let victim = t.points[victim_idx].kid;
            let n_records = t.server.stores.data.records.len();
            let mut target = (mix64(seed, 102) % n_records as u64) as usize;
            if t.server.stores.data.records[target].kid == victim {
                target = (target + 1) % n_records;
            }
            let flip = 1u8 << (mix64(seed, 103) % 8);
            let pos = (mix64(seed, 104)
                % t.server.stores.data.records[target].data.len() as u64)
                as usize;
            t.server.stores.data.records[target].data[pos] ^= flip;
            let request = DeletionRequest { kids: vec![victim], requester: None };
            deletion_phase(
                &mut t.server,
                &mut t.verifier,
                &t.points,
                &request,
                &t.challenge,
                &mut t.transcript,
            )
            .is_err()
        }
        Strategy::RelocateSubmodel => {
            if t.cfg.n_slices < 2 {
                return true;
            }
            // Swap the final submodel's record with an earlier, equally
            // valid one (different address, internally consistent MAC).
            let learn = last_learn(&t.transcript);
            let h_final = t.server.submodel_handle(0, final_slice).unwrap().unwrap();
            let h_earlier = t.server.submodel_handle(0, 0).unwrap().unwrap();
            let a = t.server.stores.models.get(h_final).unwrap().clone();
            let b = t.server.stores.models.get(h_earlier).unwrap().clone();
            *t.server.stores.models.get_mut(h_final).unwrap() = b;
            *t.server.stores.models.get_mut(h_earlier).unwrap() = a;
            t.server.on_prove_prediction(&t.challenge, &learn.h_model).is_err()
        }
        Strategy::RollbackSubmodel => {
            // Snapshot the pre-deletion final checkpoint (bytes and MAC),
            // let the deletion retrain honestly, then roll the stored
            // record back to the stale-but-once-valid pair.
            let h_before = t.server.submodel_handle(0, final_slice).unwrap().unwrap();
            let stale = t.server.stores.models.get(h_before).unwrap().clone();
            let plan = t.server.plan().unwrap().clone();
            let victim = t.points[plan.slices[0][final_slice][0] as usize].kid;
            let request = DeletionRequest { kids: vec![victim], requester: None };
            deletion_phase(
                &mut t.server,
                &mut t.verifier,
                &t.points,
                &request,
                &t.challenge,
                &mut t.transcript,
            )
            .expect("honest deletion");
            let learn = last_learn(&t.transcript);
            let h_after = t.server.submodel_handle(0, final_slice).unwrap().unwrap();
            *t.server.stores.models.get_mut(h_after).unwrap() = stale;
            t.server.on_prove_prediction(&t.challenge, &learn.h_model).is_err()
        }
        Strategy::StaleProofReplay => {
            // Replay the pre-deletion prediction proof (and learning proof)
            // after a deletion changed the expected digests.
            let stale_predict = match t
                .transcript
                .records
                .iter()
                .rev()
                .find(|r| matches!(r, TranscriptRecord::Predict(_)))
            {
                Some(TranscriptRecord::Predict(p)) => p.clone(),
                _ => unreachable!(),
            };
            let stale_learn = last_learn(&t.transcript);
            let victim = t.points[1].kid;
            let request = DeletionRequest { kids: vec![victim], requester: None };
            deletion_phase(
                &mut t.server,
                &mut t.verifier,
                &t.points,
                &request,
                &t.challenge,
                &mut t.transcript,
            )
            .expect("honest deletion");
            t.verifier.verify_predict(&stale_predict, &t.challenge).is_err()
                && t.verifier.verify_learn(&stale_learn).is_err()
        }
    }
}

/// Runs `trials` randomized trials of every strategy.
pub fn run_all(trials: usize, seed: u64) -> Vec<AttackReport> {
    let fpr_bound = {
        let f = FilterConfig::default();
        2.0 * f.entries_per_bucket as f64 / (1u64 << f.fingerprint_bits) as f64 * 3.0
    };
    Strategy::ALL
        .iter()
        .map(|&strategy| {
            let rejected = (0..trials)
                .filter(|&i| run_trial(strategy, mix64(seed, (i as u64) << 8 | strategy as u64)))
                .count();
            AttackReport {
                strategy: strategy.name(),
                trials,
                rejected,
                detection_rate: rejected as f64 / trials.max(1) as f64,
                fpr_bound,
            }
        })
        .collect()
}
