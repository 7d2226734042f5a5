//! Benchmark runners: filter vs MHT operation timings, false-positive-rate
//! measurement, unlearning-cost sweeps, storage accounting, and the slice
//! and hyperparameter sweeps.

use std::time::Instant;

use rand_chacha::rand_core::RngCore;
use serde::Serialize;

use poul_core::crypto::chacha_from_u64;
use poul_core::filter::{fingerprint, kid_bucket_hash, CuckooFilter, FilterConfig, PrfKey};
use poul_core::messages::SessionId;
use poul_core::mht::MerkleTree;
use poul_core::ml::{self, Dims, Hyperparams};
use poul_core::protocol::{
    deletion_phase, setup_phase, DeletionRequest, Server, SessionConfig, Transcript, Verifier,
};
use poul_core::sisa::{self, DataPoint, StepKind};

/// Mean/min/max over repeated measurements, microseconds per operation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimingStats {
    pub mean_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub reps: usize,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { mean_us: mean, min_us: min, max_us: max, reps: samples.len() }
    }
}

/// Per-structure operation timings plus the measured speedups.
#[derive(Debug, Clone, Serialize)]
pub struct CompareResult {
    pub elements: usize,
    pub cuckoo_insert: TimingStats,
    pub cuckoo_query: TimingStats,
    pub cuckoo_delete: TimingStats,
    pub mht_update: TimingStats,
    pub mht_query_with_path: TimingStats,
    pub mht_delete: TimingStats,
    pub speedup_insert: f64,
    pub speedup_query: f64,
    pub speedup_delete: f64,
}

fn random_items(n: usize, fp_bits: u32, seed: u64) -> Vec<(u32, u64)> {
    let mask = if fp_bits == 32 { u32::MAX } else { (1 << fp_bits) - 1 };
    let mut rng = chacha_from_u64(seed);
    (0..n).map(|_| ((rng.next_u32() & mask).max(1), rng.next_u64())).collect()
}

/// Times cuckoo insert/query/delete, mean per operation over `reps` fresh
/// filters of `n` items each.
pub fn bench_cuckoo_ops(
    n: usize,
    config: FilterConfig,
    reps: usize,
    seed: u64,
) -> (TimingStats, TimingStats, TimingStats) {
    let mut ins = Vec::with_capacity(reps);
    let mut qry = Vec::with_capacity(reps);
    let mut del = Vec::with_capacity(reps);
    for r in 0..reps {
        let items = random_items(n, config.fingerprint_bits, seed ^ (r as u64) << 32);
        let mut filter = CuckooFilter::new(config, seed).expect("valid config");
        let t = Instant::now();
        for (fp, h1) in &items {
            filter.insert(*fp, *h1).expect("capacity-sized filter");
        }
        ins.push(t.elapsed().as_secs_f64() * 1e6 / n as f64);

        let negatives = random_items(n, config.fingerprint_bits, !seed ^ (r as u64));
        let t = Instant::now();
        let mut hits = 0usize;
        for ((fp, h1), (nfp, nh1)) in items.iter().zip(negatives.iter()) {
            hits += filter.query(*fp, *h1) as usize;
            hits += filter.query(*nfp, *nh1) as usize;
        }
        std::hint::black_box(hits);
        qry.push(t.elapsed().as_secs_f64() * 1e6 / (2 * n) as f64);

        let t = Instant::now();
        for (fp, h1) in &items {
            filter.delete(*fp, *h1);
        }
        del.push(t.elapsed().as_secs_f64() * 1e6 / n as f64);
    }
    (
        TimingStats::from_samples(&ins),
        TimingStats::from_samples(&qry),
        TimingStats::from_samples(&del),
    )
}

/// Times MHT update / query-with-path (prove + verify) / delete, mean per
/// operation over `ops` random leaves, repeated `reps` times.
pub fn bench_mht_ops(
    leaves: usize,
    ops: usize,
    reps: usize,
    seed: u64,
) -> (TimingStats, TimingStats, TimingStats) {
    let leaf_data: Vec<[u8; 8]> = (0..leaves as u64).map(|i| i.to_le_bytes()).collect();
    let mut upd = Vec::with_capacity(reps);
    let mut qry = Vec::with_capacity(reps);
    let mut del = Vec::with_capacity(reps);
    for r in 0..reps {
        let mut tree = MerkleTree::build(&leaf_data).expect("nonempty");
        let mut rng = chacha_from_u64(seed ^ r as u64);
        let indices: Vec<usize> =
            (0..ops).map(|_| (rng.next_u64() % leaves as u64) as usize).collect();

        let t = Instant::now();
        for (k, &i) in indices.iter().enumerate() {
            tree.update_leaf(i, &(k as u64).to_le_bytes()).unwrap();
        }
        upd.push(t.elapsed().as_secs_f64() * 1e6 / ops as f64);

        let root = tree.root();
        let t = Instant::now();
        let mut ok = 0usize;
        for (k, &i) in indices.iter().enumerate() {
            let path = tree.prove_membership(i).unwrap();
            ok += MerkleTree::verify_path(&root, &(k as u64).to_le_bytes(), i, &path) as usize;
        }
        std::hint::black_box(ok);
        qry.push(t.elapsed().as_secs_f64() * 1e6 / ops as f64);

        let t = Instant::now();
        for &i in &indices {
            tree.delete_leaf(i).unwrap();
        }
        del.push(t.elapsed().as_secs_f64() * 1e6 / ops as f64);
    }
    (
        TimingStats::from_samples(&upd),
        TimingStats::from_samples(&qry),
        TimingStats::from_samples(&del),
    )
}

/// Head-to-head comparison of the two authenticated structures at `n`
/// elements.
pub fn bench_compare(n: usize, fp_bits: u32, entries: usize, reps: usize, seed: u64) -> CompareResult {
    let config = FilterConfig::for_capacity(n, entries, fp_bits);
    let (ci, cq, cd) = bench_cuckoo_ops(n, config, reps, seed);
    // MHT ops are orders of magnitude slower; sample fewer operations.
    let ops = 4000.min(n);
    let (mu, mq, md) = bench_mht_ops(n, ops, reps, seed ^ 0xdead);
    CompareResult {
        elements: n,
        speedup_insert: mu.mean_us / ci.mean_us,
        speedup_query: mq.mean_us / cq.mean_us,
        speedup_delete: md.mean_us / cd.mean_us,
        cuckoo_insert: ci,
        cuckoo_query: cq,
        cuckoo_delete: cd,
        mht_update: mu,
        mht_query_with_path: mq,
        mht_delete: md,
    }
}

/// False-positive-rate measurement through the real keyed-fingerprint path.
#[derive(Debug, Clone, Serialize)]
pub struct FprResult {
    pub items: usize,
    pub bucket_count: usize,
    pub entries_per_bucket: usize,
    pub fingerprint_bits: u32,
    pub load_factor: f64,
    pub negatives: usize,
    pub false_positives: usize,
    pub fpr: f64,
    pub insert_failures: usize,
}

pub fn measure_fpr(config: FilterConfig, items: usize, negatives: usize, seed: u64) -> FprResult {
    let key = PrfKey([7u8; 16]);
    let eid = [9u8; 32];
    let mut filter = CuckooFilter::new(config, seed).expect("valid config");
    let mut rng = chacha_from_u64(seed);
    let mut insert_failures = 0usize;
    for i in 0..items {
        let kid = (i as u64) << 20 | (rng.next_u64() & 0xfffff);
        let data = rng.next_u64().to_le_bytes();
        let fp = fingerprint(&key, &config, kid, &data, &eid, None);
        if filter.insert(fp, kid_bucket_hash(kid)).is_err() {
            insert_failures += 1;
        }
    }
    // Negatives draw kids from a disjoint range, so none was inserted.
    let mut false_positives = 0usize;
    for i in 0..negatives {
        let kid = (1u64 << 63) | i as u64;
        let data = rng.next_u64().to_le_bytes();
        let fp = fingerprint(&key, &config, kid, &data, &eid, None);
        if filter.query(fp, kid_bucket_hash(kid)) {
            false_positives += 1;
        }
    }
    FprResult {
        items,
        bucket_count: config.bucket_count,
        entries_per_bucket: config.entries_per_bucket,
        fingerprint_bits: config.fingerprint_bits,
        load_factor: filter.load_factor(),
        negatives,
        false_positives,
        fpr: false_positives as f64 / negatives.max(1) as f64,
        insert_failures,
    }
}

/// Unique random-feature data points (continuous features avoid kid
/// collisions at small dimensions).
pub fn random_points(n: usize, dim: usize, seed: u64) -> Vec<DataPoint> {
    let mut rng = chacha_from_u64(seed);
    (0..n)
        .map(|_| {
            let features: Vec<f32> =
                (0..dim).map(|_| (rng.next_u32() >> 8) as f32 / 16_777_216.0).collect();
            DataPoint::new(features, rng.next_u32() % 2)
        })
        .collect()
}

/// One row of the unlearning-cost sweep: deleting from slice `position`
/// (1-based) retrains `retrained` submodels.
#[derive(Debug, Clone, Serialize)]
pub struct UnlearnRow {
    pub position: usize,
    pub retrained: usize,
    pub retrain_us_mean: f64,
    pub checkpoint_restore_us_mean: f64,
    /// Initial learning time of the same suffix during setup (comparison).
    pub learn_us_mean: f64,
    pub overhead_fraction: f64,
    pub reps: usize,
}

/// Sweeps the deletion position over all slices of a one-shard session.
pub fn bench_unlearn(
    dims: Dims,
    points_per_run: usize,
    n_slices: usize,
    hp: Hyperparams,
    reps: usize,
    seed: u64,
) -> Vec<UnlearnRow> {
    let mut rows: Vec<UnlearnRow> = Vec::new();
    for position in 1..=n_slices {
        let mut retrain_us = Vec::with_capacity(reps);
        let mut ckpt_us = Vec::with_capacity(reps);
        let mut learn_us = Vec::with_capacity(reps);
        let mut retrained = 0usize;
        for rep in 0..reps {
            let run_seed = seed ^ ((position * 31 + rep) as u64);
            let cfg = SessionConfig {
                sid: SessionId(run_seed),
                dims,
                hp,
                n_shards: 1,
                n_slices,
                m0_seed: run_seed ^ 3,
                plan_seed: run_seed ^ 4,
                filter: FilterConfig { bucket_count: 1 << 12, ..FilterConfig::default() },
            };
            let points = random_points(points_per_run, dims.input, run_seed ^ 5);
            let mut server = Server::new(cfg.clone(), Some(run_seed));
            let mut verifier =
                Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
            let mut transcript = Transcript::new();
            let challenge = points[0].features.clone();
            let setup =
                setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript)
                    .expect("honest setup");
            // Learning time of the suffix that the deletion will retrain.
            learn_us.push(
                setup
                    .timings
                    .iter()
                    .filter(|t| t.slice + 1 >= position)
                    .map(|t| t.train_us)
                    .sum::<u64>() as f64,
            );

            let plan = server.plan().unwrap().clone();
            let slice = &plan.slices[0][position - 1];
            let victim = points[slice[slice.len() / 2] as usize].kid;
            let request = DeletionRequest { kids: vec![victim], requester: None };
            let outcome = deletion_phase(
                &mut server,
                &mut verifier,
                &points,
                &request,
                &challenge,
                &mut transcript,
            )
            .expect("honest deletion");
            retrained = outcome.timings.iter().filter(|t| t.kind == StepKind::Unlearn).count();
            retrain_us.push(outcome.timings.iter().map(|t| t.train_us).sum::<u64>() as f64);
            ckpt_us.push(
                outcome.timings.iter().map(|t| t.checkpoint_us + t.restore_us).sum::<u64>() as f64,
            );
        }
        let retrain = TimingStats::from_samples(&retrain_us);
        let ckpt = TimingStats::from_samples(&ckpt_us);
        let learn = TimingStats::from_samples(&learn_us);
        rows.push(UnlearnRow {
            position,
            retrained,
            retrain_us_mean: retrain.mean_us,
            checkpoint_restore_us_mean: ckpt.mean_us,
            learn_us_mean: learn.mean_us,
            overhead_fraction: ckpt.mean_us / retrain.mean_us.max(1.0),
            reps,
        });
    }
    rows
}

/// Storage accounting for the four structures: measured bytes from a live
/// session plus formula extrapolations.
#[derive(Debug, Clone, Serialize)]
pub struct StorageReport {
    pub key_entry_bytes: usize,
    pub key_list_bytes_measured: usize,
    pub key_list_entries: usize,
    pub key_list_bytes_at_shard_scale: usize,
    pub filter_payload_bytes: usize,
    pub filter_formula_bytes: usize,
    pub model_link_live_bytes: usize,
    pub model_record_expected_bytes: usize,
    pub n_submodels: usize,
    pub data_store_bytes: usize,
    pub data_points: usize,
}

pub const SHARD_SCALE_ENTRIES: usize = 56_073;

/// Runs a real session at the given scale and reports every structure's
/// size; formula columns extrapolate to the 56,073-entry shard scale.
pub fn bench_storage(
    dims: Dims,
    n_points: usize,
    n_slices: usize,
    filter: FilterConfig,
    seed: u64,
) -> StorageReport {
    let cfg = SessionConfig {
        sid: SessionId(seed),
        dims,
        hp: Hyperparams { batch_size: 64, epochs: 1, learning_rate: 0.1, rng_seed: seed },
        n_shards: 1,
        n_slices,
        m0_seed: seed ^ 1,
        plan_seed: seed ^ 2,
        filter,
    };
    let points = random_points(n_points, dims.input, seed ^ 9);
    let mut server = Server::new(cfg.clone(), Some(seed));
    let mut verifier =
        Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
    let mut transcript = Transcript::new();
    let challenge = points[0].features.clone();
    setup_phase(&mut server, &mut verifier, &points, &challenge, &mut transcript)
        .expect("honest setup");

    let key_list_bytes = server.enclave().key_list_bytes().unwrap();
    let filter_bytes = server.filter_snapshot().unwrap();
    const FILTER_HEADER_BYTES: usize = 4 + 8 + 4 + 4 + 8 + 8;
    StorageReport {
        key_entry_bytes: poul_core::auth::KEY_ENTRY_LEN,
        key_list_bytes_measured: key_list_bytes,
        key_list_entries: n_points,
        key_list_bytes_at_shard_scale: SHARD_SCALE_ENTRIES * poul_core::auth::KEY_ENTRY_LEN,
        filter_payload_bytes: filter_bytes.len() - FILTER_HEADER_BYTES,
        filter_formula_bytes: cfg.filter.payload_bytes(),
        model_link_live_bytes: server.enclave().live_model_bytes(&server.stores).unwrap(),
        model_record_expected_bytes: dims.canonical_len() + 8 + 8 + 32,
        n_submodels: n_slices,
        data_store_bytes: server.stores.data.payload_bytes(),
        data_points: n_points,
    }
}

/// One row of the slice-count sweep at fixed total epochs-over-data.
#[derive(Debug, Clone, Serialize)]
pub struct SliceSweepRow {
    pub n_slices: usize,
    pub n_shards: usize,
    pub epochs_per_step: u32,
    pub train_seconds: f64,
    pub test_accuracy: f64,
}

fn shard_final_model(
    train_set: &ml::SampleSet,
    shard_indices: &[u32],
    dims: Dims,
    s: usize,
    step_hp: &Hyperparams,
    seed: u64,
) -> ml::ModelParams {
    let slices = sisa::slice(shard_indices, s, seed).expect("valid slice count");
    let m0 = ml::init_model(dims, seed ^ 0xAB).expect("valid dims");
    let chain = sisa::incremental_chain(&m0, train_set, &slices, step_hp).expect("trains");
    chain.into_iter().last().expect("nonempty chain")
}

/// Trains each slice count, scaling per-step epochs so the total sample
/// visits stay fixed (cumulative steps revisit earlier slices, hence the
/// 2/(s+1) factor), and reports the aggregated test accuracy over the
/// shards' constituent models. Shards are independent and may train on
/// separate threads; the result is identical either way.
pub fn sweep_slices(
    train: &[DataPoint],
    test: &[DataPoint],
    dims: Dims,
    slice_counts: &[usize],
    base_epochs: u32,
    hp: Hyperparams,
    n_shards: usize,
    parallel_shards: bool,
    seed: u64,
) -> Vec<SliceSweepRow> {
    let train_set = sisa::sample_set_of(train, dims.input);
    let test_set = sisa::sample_set_of(test, dims.input);
    let test_order: Vec<u32> = (0..test.len() as u32).collect();
    let shards = sisa::shard(train.len(), n_shards, seed).expect("valid shard count");
    let mut rows = Vec::new();
    for &s in slice_counts {
        let epochs = ((2.0 * base_epochs as f64 / (s as f64 + 1.0)).round() as u32).max(1);
        let step_hp = Hyperparams { epochs, ..hp };
        let t = Instant::now();
        let constituents: Vec<ml::ModelParams> = if parallel_shards && n_shards > 1 {
            std::thread::scope(|scope| {
                let handles: Vec<_> = shards
                    .iter()
                    .enumerate()
                    .map(|(j, indices)| {
                        let train_set = &train_set;
                        let step_hp = &step_hp;
                        scope.spawn(move || {
                            shard_final_model(
                                train_set,
                                indices,
                                dims,
                                s,
                                step_hp,
                                seed ^ j as u64,
                            )
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("shard thread")).collect()
            })
        } else {
            shards
                .iter()
                .enumerate()
                .map(|(j, indices)| {
                    shard_final_model(&train_set, indices, dims, s, &step_hp, seed ^ j as u64)
                })
                .collect()
        };
        let train_seconds = t.elapsed().as_secs_f64();
        let refs: Vec<&ml::ModelParams> = constituents.iter().collect();
        let mut correct = 0usize;
        for &i in &test_order {
            let p = sisa::aggregate_predict(&refs, test_set.features_of(i as usize))
                .expect("aggregates");
            if p.label == test_set.label_of(i as usize) as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / test_order.len().max(1) as f64;
        rows.push(SliceSweepRow {
            n_slices: s,
            n_shards,
            epochs_per_step: epochs,
            train_seconds,
            test_accuracy: acc,
        });
    }
    rows
}


/// One row of the hyperparameter sweep (epoch axis or batch axis).
#[derive(Debug, Clone, Serialize)]
pub struct HparamRow {
    pub epochs: u32,
    pub batch_size: usize,
    pub test_accuracy: f64,
    pub train_seconds: f64,
}

/// Accuracy at each (epochs, batch) combination on a monolithic training
/// run (the accuracy-tuning experiment shape).
pub fn sweep_hparams(
    train: &[DataPoint],
    test: &[DataPoint],
    dims: Dims,
    combos: &[(u32, usize)],
    lr: f32,
    seed: u64,
) -> Vec<HparamRow> {
    let train_set = sisa::sample_set_of(train, dims.input);
    let test_set = sisa::sample_set_of(test, dims.input);
    let order: Vec<u32> = (0..train.len() as u32).collect();
    let test_order: Vec<u32> = (0..test.len() as u32).collect();
    let m0 = ml::init_model(dims, seed ^ 0xCD).expect("valid dims");
    combos
        .iter()
        .map(|&(epochs, batch_size)| {
            let hp = Hyperparams { batch_size, epochs, learning_rate: lr, rng_seed: seed };
            let t = Instant::now();
            let m = ml::train_sgd(&m0, &train_set, &order, &hp).expect("trains");
            let train_seconds = t.elapsed().as_secs_f64();
            let acc = ml::accuracy(&m, &test_set, &test_order).expect("evaluates");
            HparamRow { epochs, batch_size, test_accuracy: acc, train_seconds }
        })
        .collect()
}
