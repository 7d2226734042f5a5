//! Acceptance suite: one test per release criterion, each printing a
//! single PASS line with the measured numbers (run with `--nocapture` to
//! see them). Every tolerance is pinned here, not configurable.

use std::sync::Mutex;
use std::time::Instant;

use poul_cli::{attack, bench};
use poul_core::crypto::mix64;
use poul_core::dataset::{gen_dataset, GenSpec};
use poul_core::filter::FilterConfig;
use poul_core::messages::SessionId;
use poul_core::ml::{self, Dims, Hyperparams};
use poul_core::protocol::{
    deletion_phase, setup_phase, verify_transcript, DeletionRequest, Server, SessionConfig,
    Transcript, Verifier,
};
use poul_core::sisa::{incremental_chain, sample_set_of, DataPoint, ShardPlan, StepKind};

/// The wall-clock criteria (5 and 7) must not share the CPU with the
/// training-heavy ones, so every criterion takes this lock and the suite
/// runs one test at a time regardless of harness threads.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(criterion: u32, name: &str, details: &str) {
    println!("ACCEPTANCE {criterion:02} {name}: PASS - {details}");
}

fn random_points(n: usize, dim: usize, seed: u64) -> Vec<DataPoint> {
    bench::random_points(n, dim, seed)
}

fn oracle_chain(
    cfg: &SessionConfig,
    plan: &ShardPlan,
    points: &[DataPoint],
    shard: usize,
    deleted: &[u64],
) -> Vec<Vec<u8>> {
    let set = sample_set_of(points, cfg.dims.input);
    let surviving: Vec<Vec<u32>> = plan.slices[shard]
        .iter()
        .map(|slice| {
            slice
                .iter()
                .copied()
                .filter(|&idx| !deleted.contains(&points[idx as usize].kid))
                .collect()
        })
        .collect();
    let m0 = ml::init_model(cfg.dims, cfg.m0_seed).unwrap();
    incremental_chain(&m0, &set, &surviving, &cfg.hp)
        .unwrap()
        .iter()
        .map(|m| m.canonical_bytes())
        .collect()
}

fn enclave_chain(server: &Server, shard: usize, n_slices: usize) -> Vec<Vec<u8>> {
    (0..n_slices).map(|i| server.submodel_bytes(shard, i).unwrap()).collect()
}

/// Criterion 1: for 20 randomized configs the post-unlearn chain is
/// byte-identical to retraining from scratch on the surviving data with
/// identical seeds. Tolerance: exact equality. Runtime < 5 min.
#[test]
fn acceptance_01_exact_unlearning_equivalence() {
    let _serial = serial();
    let started = Instant::now();
    let shards_choices = [1usize, 2];
    let slices_choices = [1usize, 3, 6];
    for run in 0..20u64 {
        let seed = mix64(0xAC01, run);
        let n_shards = shards_choices[(mix64(seed, 1) % 2) as usize];
        let n_slices = slices_choices[(mix64(seed, 2) % 3) as usize];
        let n_points = 240 + (mix64(seed, 3) % 1761) as usize; // <= 2000
        let cfg = SessionConfig {
            sid: SessionId(seed),
            dims: Dims::new(24, 8, 2),
            hp: Hyperparams {
                batch_size: 32,
                epochs: 2,
                learning_rate: 0.1,
                rng_seed: mix64(seed, 4),
            },
            n_shards,
            n_slices,
            m0_seed: mix64(seed, 5),
            plan_seed: mix64(seed, 6),
            filter: FilterConfig { bucket_count: 1 << 11, ..FilterConfig::default() },
        };
        let points = random_points(n_points, cfg.dims.input, mix64(seed, 7));
        let mut server = Server::new(cfg.clone(), Some(mix64(seed, 8)));
        let mut verifier =
            Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
        let mut transcript = Transcript::new();
        let challenge = points[0].features.clone();
        setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript).unwrap();

        // Random deletion position across all shards and slices.
        let plan = server.plan().unwrap().clone();
        let shard = (mix64(seed, 9) % n_shards as u64) as usize;
        let slice = (mix64(seed, 10) % n_slices as u64) as usize;
        let slice_points = &plan.slices[shard][slice];
        let victim =
            points[slice_points[(mix64(seed, 11) % slice_points.len() as u64) as usize] as usize]
                .kid;

        let request = DeletionRequest { kids: vec![victim], requester: None };
        deletion_phase(&mut server, &mut verifier, &points, &request, &challenge, &mut transcript)
            .unwrap();

        for j in 0..n_shards {
            let oracle = oracle_chain(&cfg, &plan, &points, j, &[victim]);
            let got = enclave_chain(&server, j, n_slices);
            assert_eq!(got, oracle, "run {run}: shard {j} chain differs from oracle");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 300, "runtime bound: {elapsed:?} >= 5 min");
    pass(
        1,
        "exact unlearning equivalence",
        &format!("20/20 randomized configs byte-identical to retrain oracle in {elapsed:.2?}"),
    );
}

/// Criterion 2: 50/50 randomized honest setup+deletion transcripts accept
/// all of verify_receipt / verify_learn / verify_predict.
#[test]
fn acceptance_02_protocol_completeness() {
    let _serial = serial();
    let shards_choices = [1usize, 2, 5];
    let slices_choices = [1usize, 3, 6, 12];
    let mut records_checked = 0usize;
    for run in 0..50u64 {
        let seed = mix64(0xAC02, run);
        let n_shards = shards_choices[(mix64(seed, 1) % 3) as usize];
        let n_slices = slices_choices[(mix64(seed, 2) % 4) as usize];
        let n_points = (n_shards * n_slices * 3).max(150) + (mix64(seed, 3) % 120) as usize;
        let cfg = SessionConfig {
            sid: SessionId(seed),
            dims: Dims::new(16, 6, 2),
            hp: Hyperparams {
                batch_size: 16,
                epochs: 1,
                learning_rate: 0.1,
                rng_seed: mix64(seed, 4),
            },
            n_shards,
            n_slices,
            m0_seed: mix64(seed, 5),
            plan_seed: mix64(seed, 6),
            filter: FilterConfig { bucket_count: 1 << 10, ..FilterConfig::default() },
        };
        let points = random_points(n_points, cfg.dims.input, mix64(seed, 7));
        let mut server = Server::new(cfg.clone(), Some(mix64(seed, 8)));
        let mut verifier =
            Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
        let mut transcript = Transcript::new();
        let challenge = points[0].features.clone();
        setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript)
            .unwrap_or_else(|e| panic!("run {run}: setup rejected: {e}"));
        let victim = points[(mix64(seed, 9) % n_points as u64) as usize].kid;
        let challenge2 = points[1].features.clone();
        let request = DeletionRequest { kids: vec![victim], requester: None };
        deletion_phase(&mut server, &mut verifier, &points, &request, &challenge2, &mut transcript)
            .unwrap_or_else(|e| panic!("run {run}: deletion rejected: {e}"));

        // Offline replay accepts the complete transcript as well.
        records_checked += verify_transcript(
            server.public_key(),
            server.eid(),
            cfg.sid,
            server.programs(),
            &transcript,
        )
        .unwrap_or_else(|e| panic!("run {run}: transcript replay rejected: {e}"));
    }
    pass(
        2,
        "protocol completeness",
        &format!("50/50 honest runs accepted; {records_checked} transcript records replayed"),
    );
}

/// Criterion 3: every tamper strategy rejected in 100/100 trials; the
/// data-replacement detection rate is reported against the FPR bound.
#[test]
fn acceptance_03_attack_soundness() {
    let _serial = serial();
    let reports = attack::run_all(100, 0xAC03);
    for r in &reports {
        assert_eq!(
            r.rejected, r.trials,
            "strategy {} accepted {} attack(s)",
            r.strategy,
            r.trials - r.rejected
        );
    }
    let replace = reports.iter().find(|r| r.strategy == "replace-data").unwrap();
    assert!(
        replace.detection_rate >= 1.0 - replace.fpr_bound,
        "data-replacement detection {} below 1 - FPR bound {}",
        replace.detection_rate,
        1.0 - replace.fpr_bound
    );
    pass(
        3,
        "attack soundness",
        &format!(
            "6 strategies x 100/100 rejected; data-replacement detection {:.3} >= {:.4}",
            replace.detection_rate,
            1.0 - replace.fpr_bound
        ),
    );
}

/// Criterion 4: measured FPR over 1e6 negatives lies in [0.001, 0.006] at
/// f=12 and [0.02, 0.06] at f=8 (desk scale: 3,500 items, 4 entries per
/// bucket, capacity-sized table reproducing the reference load).
#[test]
fn acceptance_04_cuckoo_filter_fpr() {
    let _serial = serial();
    let items = 3_500usize;
    let negatives = 1_000_000usize;

    let cfg12 = FilterConfig::for_capacity(items, 4, 12);
    let r12 = bench::measure_fpr(cfg12, items, negatives, 0xAC04);
    assert_eq!(r12.insert_failures, 0);
    assert!(
        (0.001..=0.006).contains(&r12.fpr),
        "f=12 FPR {} outside [0.001, 0.006] (buckets {}, load {:.2})",
        r12.fpr,
        cfg12.bucket_count,
        r12.load_factor
    );

    let cfg8 = FilterConfig::for_capacity(items, 4, 8);
    let r8 = bench::measure_fpr(cfg8, items, negatives, 0xAC05);
    assert_eq!(r8.insert_failures, 0);
    assert!(
        (0.02..=0.06).contains(&r8.fpr),
        "f=8 FPR {} outside [0.02, 0.06] (buckets {}, load {:.2})",
        r8.fpr,
        cfg8.bucket_count,
        r8.load_factor
    );

    // Report-only: the 2^12-bucket table at the same item count runs at 21%
    // load and lands proportionally lower, far below the reference windows.
    let oversized = FilterConfig { bucket_count: 1 << 12, ..FilterConfig::default() };
    let r_oversized = bench::measure_fpr(oversized, items, negatives / 4, 0xAC06);

    pass(
        4,
        "cuckoo filter FPR",
        &format!(
            "f=12: {:.5} in [0.001,0.006]; f=8: {:.5} in [0.02,0.06] ({} items, load {:.2}; 2^12-bucket reference point: {:.5} at load {:.2})",
            r12.fpr, r8.fpr, items, r12.load_factor, r_oversized.fpr, r_oversized.load_factor
        ),
    );
}

/// Criterion 5: at >= 50,000 elements each cuckoo operation beats the MHT
/// counterpart by >= 10x wall time. Runtime < 2 min.
#[test]
fn acceptance_05_filter_vs_mht_speed() {
    let _serial = serial();
    let started = Instant::now();
    let n = 56_073usize;
    let cmp = bench::bench_compare(n, 8, 4, 5, 0xAC06);
    for (name, speedup) in [
        ("insert", cmp.speedup_insert),
        ("query", cmp.speedup_query),
        ("delete", cmp.speedup_delete),
    ] {
        assert!(speedup >= 10.0, "{name} speedup {speedup:.1}x below 10x");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "runtime bound: {elapsed:?} >= 2 min");
    pass(
        5,
        "filter vs MHT speed",
        &format!(
            "{n} elements: insert {:.0}x, query {:.0}x, delete {:.0}x (all >= 10x) in {elapsed:.2?}",
            cmp.speedup_insert, cmp.speedup_query, cmp.speedup_delete
        ),
    );
}

/// Criterion 6: storage accounting. key_list <= 52 B/entry and <= 2.92 MB
/// at 56,073 entries; model_link for 6 default submodels within 10% of
/// 6 x 308,744 B; filter size exactly buckets*entries*f/8.
#[test]
fn acceptance_06_storage_accounting() {
    let _serial = serial();
    let dims = Dims::purchase_default();
    let filter = FilterConfig::default(); // 2^16 x 4 x 12
    let report = bench::bench_storage(dims, 600, 6, filter, 0xAC07);

    assert!(report.key_entry_bytes <= 52);
    assert_eq!(report.key_list_bytes_measured, 600 * 52);
    assert!(report.key_list_bytes_at_shard_scale <= 2_920_000);

    let expected_model_payload = 6 * 308_744;
    let ratio = report.model_link_live_bytes as f64 / expected_model_payload as f64;
    assert!(
        (0.9..=1.1).contains(&ratio),
        "model_link {} B not within 10% of {} B",
        report.model_link_live_bytes,
        expected_model_payload
    );

    let formula = filter.bucket_count * filter.entries_per_bucket
        * filter.fingerprint_bits as usize
        / 8;
    assert_eq!(report.filter_payload_bytes, formula);
    assert_eq!(report.filter_formula_bytes, formula);

    pass(
        6,
        "storage accounting",
        &format!(
            "key entry 52 B ({} B at shard scale <= 2.92 MB); model_link {} B = {:.3}x of 6x308744; filter {} B exact",
            report.key_list_bytes_at_shard_scale, report.model_link_live_bytes, ratio, formula
        ),
    );
}

/// Criterion 7: over deletion positions 1..6, the retrained-submodel count
/// equals s-i+1 exactly, mean retrain time is nonincreasing, and
/// checkpoint+restore stays under 5% of the corresponding learning time.
#[test]
fn acceptance_07_unlearning_cost_shape() {
    let _serial = serial();
    let dims = Dims::new(100, 32, 2);
    let hp = Hyperparams { batch_size: 64, epochs: 2, learning_rate: 0.02, rng_seed: 5 };
    let rows = bench::bench_unlearn(dims, 2400, 6, hp, 5, 0xAC08);
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(r.retrained, 6 - r.position + 1, "position {}", r.position);
        assert!(
            r.checkpoint_restore_us_mean < 0.05 * r.learn_us_mean,
            "position {}: checkpoint+restore {:.0}us >= 5% of learn {:.0}us",
            r.position,
            r.checkpoint_restore_us_mean,
            r.learn_us_mean
        );
    }
    for pair in rows.windows(2) {
        assert!(
            pair[0].retrain_us_mean >= pair[1].retrain_us_mean,
            "retrain time increased from position {} ({:.0}us) to {} ({:.0}us)",
            pair[0].position,
            pair[0].retrain_us_mean,
            pair[1].position,
            pair[1].retrain_us_mean
        );
    }
    let overhead_max = rows
        .iter()
        .map(|r| r.checkpoint_restore_us_mean / r.learn_us_mean)
        .fold(0.0f64, f64::max);
    pass(
        7,
        "unlearning cost shape",
        &format!(
            "counts s-i+1 exact; retrain {:.0}us -> {:.0}us nonincreasing; max ckpt overhead {:.2}%",
            rows[0].retrain_us_mean,
            rows[5].retrain_us_mean,
            overhead_max * 100.0
        ),
    );
}

/// Criterion 8: the verifier performs exactly one signature check per
/// assertion, independent of slice count and of how many submodels were
/// retrained.
#[test]
fn acceptance_08_constant_verification_cost() {
    let _serial = serial();
    for n_slices in [1usize, 3, 6, 12] {
        let seed = mix64(0xAC09, n_slices as u64);
        let cfg = SessionConfig {
            sid: SessionId(seed),
            dims: Dims::new(16, 6, 2),
            hp: Hyperparams { batch_size: 16, epochs: 1, learning_rate: 0.1, rng_seed: seed },
            n_shards: 1,
            n_slices,
            m0_seed: seed ^ 1,
            plan_seed: seed ^ 2,
            filter: FilterConfig { bucket_count: 1 << 10, ..FilterConfig::default() },
        };
        let points = random_points(26 * n_slices.max(2), cfg.dims.input, seed ^ 3);
        let mut server = Server::new(cfg.clone(), Some(seed));
        let mut verifier =
            Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
        let mut transcript = Transcript::new();
        let challenge = points[0].features.clone();
        setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript).unwrap();

        // Deletion from slice 1 retrains the whole chain; the verifier's
        // per-assertion cost must not notice.
        let plan = server.plan().unwrap().clone();
        let victim = points[plan.slices[0][0][0] as usize].kid;
        let (_, receipt) = server.on_commit_del(victim, None).unwrap();
        let before = verifier.sig_check_count();
        verifier.verify_receipt(&receipt).unwrap();
        assert_eq!(verifier.sig_check_count() - before, 1);

        let c = server.filter_digest().unwrap();
        let (learn, timings) = server.on_prove_learning(&c, StepKind::Unlearn).unwrap();
        assert_eq!(timings.len(), n_slices, "full-chain retrain at s={n_slices}");
        let before = verifier.sig_check_count();
        verifier.verify_learn(&learn).unwrap();
        assert_eq!(verifier.sig_check_count() - before, 1, "verify_learn at s={n_slices}");

        let predict = server.on_prove_prediction(&challenge, &learn.h_model).unwrap();
        let before = verifier.sig_check_count();
        verifier.verify_predict(&predict, &challenge).unwrap();
        assert_eq!(verifier.sig_check_count() - before, 1, "verify_predict at s={n_slices}");
    }
    pass(
        8,
        "constant verification cost",
        "exactly 1 signature check per assertion across s in {1,3,6,12} with full-chain retrains",
    );
}

/// Criterion 9: at fixed total epochs-over-data, final accuracy across
/// s in {1,3,6,12} varies by at most 3 percentage points.
#[test]
fn acceptance_09_slice_count_insensitivity() {
    let _serial = serial();
    let spec = GenSpec { n_train: 3000, n_test: 800, dim: 600, classes: 2, seed: 1 };
    let (train, test) = gen_dataset(&spec);
    let dims = Dims::new(600, 128, 2);
    let hp = Hyperparams { batch_size: 100, epochs: 7, learning_rate: 0.02, rng_seed: 1 };
    let rows = bench::sweep_slices(&train, &test, dims, &[1, 3, 6, 12], 7, hp, 1, false, 1);
    let max = rows.iter().map(|r| r.test_accuracy).fold(f64::MIN, f64::max);
    let min = rows.iter().map(|r| r.test_accuracy).fold(f64::MAX, f64::min);
    let spread = max - min;
    assert!(
        spread <= 0.03,
        "accuracy spread {:.4} exceeds 3 points: {:?}",
        spread,
        rows.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()
    );
    pass(
        9,
        "slice count insensitivity",
        &format!(
            "accuracies {} -> spread {:.2} points <= 3",
            rows.iter().map(|r| format!("{:.3}", r.test_accuracy)).collect::<Vec<_>>().join("/"),
            spread * 100.0
        ),
    );
}

/// Criterion 10: the synthetic stand-in reaches >= 90% test accuracy at 22
/// epochs / batch 1000, and accuracy is monotone nondecreasing over
/// epochs {5, 10, 22}.
#[test]
fn acceptance_10_accuracy_trend() {
    let _serial = serial();
    let spec = GenSpec { n_train: 12_000, n_test: 3_000, dim: 600, classes: 2, seed: 0 };
    let (train, test) = gen_dataset(&spec);
    let dims = Dims::new(600, 128, 2);
    let train_set = sample_set_of(&train, 600);
    let test_set = sample_set_of(&test, 600);
    let order: Vec<u32> = (0..train.len() as u32).collect();
    let test_order: Vec<u32> = (0..test.len() as u32).collect();
    let m0 = ml::init_model(dims, 7).unwrap();

    let mut accs = Vec::new();
    for epochs in [5u32, 10, 22] {
        let hp = Hyperparams { batch_size: 1000, epochs, learning_rate: 0.02, rng_seed: 3 };
        let m = ml::train_sgd(&m0, &train_set, &order, &hp).unwrap();
        accs.push(ml::accuracy(&m, &test_set, &test_order).unwrap());
    }
    assert!(accs[0] <= accs[1] && accs[1] <= accs[2], "not monotone: {accs:?}");
    assert!(accs[2] >= 0.90, "22-epoch accuracy {} below 0.90", accs[2]);
    pass(
        10,
        "accuracy trend",
        &format!(
            "epochs 5/10/22 -> {:.3}/{:.3}/{:.3}, monotone and >= 0.90 at 22",
            accs[0], accs[1], accs[2]
        ),
    );
}
