//! `poul` — driver for the proof-of-unlearning stack: dataset generation,
//! protocol sessions (setup / challenge / delete / audit), benchmarks and
//! the integrity-attack simulator.
//!
//! Every command prints a human-readable table and writes machine-readable
//! results under `--results-dir`; any verification failure exits nonzero.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use poul_cli::{attack, bench, report, session::DiskSession};
use poul_core::dataset::{self, GenSpec};
use poul_core::filter::FilterConfig;
use poul_core::messages::SessionId;
use poul_core::ml::{Dims, Hyperparams};
use poul_core::protocol::{
    self, deletion_phase, setup_phase, verify_transcript, DeletionRequest, SessionConfig,
    Transcript,
};

#[derive(Parser)]
#[command(name = "poul", version, about = "Proof-of-unlearning driver and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Number of shards.
    #[arg(long, default_value_t = 1)]
    shards: usize,
    /// Number of slices per shard.
    #[arg(long, default_value_t = 6)]
    slices: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Epochs per incremental step.
    #[arg(long, default_value_t = 2)]
    epochs: u32,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.02)]
    lr: f32,
    /// Base seed for sharding, initialization and batch schedules.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Clone)]
struct FilterOpts {
    /// Fingerprint width in bits.
    #[arg(long = "fp-bits", default_value_t = 12)]
    fp_bits: u32,
    /// Bucket count (power of two); sized from the item count when omitted.
    #[arg(long)]
    buckets: Option<usize>,
    /// Entries per bucket.
    #[arg(long = "entries-per-bucket", default_value_t = 4)]
    entries_per_bucket: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic Purchase-like dataset files.
    GenDataset {
        /// Training points.
        #[arg(long, default_value_t = dataset::FULL_TRAIN)]
        train: usize,
        /// Test points.
        #[arg(long, default_value_t = dataset::FULL_TEST)]
        test: usize,
        #[arg(long, default_value_t = dataset::DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = dataset::DEFAULT_CLASSES)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for train.pods / test.pods.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run the setup phase: commit the dataset, learn the chain, prove and
    /// verify a first prediction, and persist the session.
    Setup {
        /// Training dataset file (.pods).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[command(flatten)]
        filter_opts: FilterOpts,
    },
    /// Challenge the current model with a test input and verify the proof.
    Challenge {
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
        /// Dataset index to use as the challenge (random when omitted).
        #[arg(long)]
        index: Option<usize>,
    },
    /// Delete data points and verify the full deletion phase.
    Delete {
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
        /// Kids to delete (hex, comma-separated). Overrides --index.
        #[arg(long, value_delimiter = ',')]
        kid: Vec<String>,
        /// Dataset indices to delete (comma-separated).
        #[arg(long, value_delimiter = ',')]
        index: Vec<usize>,
        /// Requesting owner id (multi-owner sessions).
        #[arg(long)]
        owner: Option<u64>,
    },
    /// Replay and verify the persisted transcript; print the audit report.
    Audit {
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Cuckoo-filter operation timings and measured false-positive rate.
    BenchFilter {
        #[arg(long, default_value_t = 56_073)]
        items: usize,
        #[arg(long, default_value_t = 1_000_000)]
        negatives: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        filter_opts: FilterOpts,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Merkle-tree baseline timings and the head-to-head comparison.
    BenchMht {
        #[arg(long, default_value_t = 56_073)]
        leaves: usize,
        #[arg(long, default_value_t = 4000)]
        ops: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "fp-bits", default_value_t = 8)]
        fp_bits: u32,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Unlearning cost by deletion position.
    BenchUnlearn {
        #[arg(long, default_value_t = 1800)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[command(flatten)]
        train_opts: TrainOpts,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Storage accounting for filter, key list, data store and model link.
    BenchStorage {
        #[arg(long, default_value_t = 600)]
        points: usize,
        #[arg(long, default_value_t = 6)]
        slices: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        filter_opts: FilterOpts,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Run every integrity-attack strategy; exits nonzero if any attack is
    /// accepted.
    AttackSim {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Accuracy and time across slice counts at fixed total epochs.
    SweepSlices {
        #[arg(long, default_value_t = 3000)]
        points: usize,
        #[arg(long = "test-points", default_value_t = 800)]
        test_points: usize,
        #[arg(long, default_value_t = 600)]
        dim: usize,
        #[arg(long = "base-epochs", default_value_t = 7)]
        base_epochs: u32,
        /// Shards whose constituent models are aggregated for accuracy.
        #[arg(long, default_value_t = 1)]
        shards: usize,
        /// Train shards on separate threads (timings become unstable).
        #[arg(long = "parallel-shards", default_value_t = false)]
        parallel_shards: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
    /// Accuracy across epoch counts and batch sizes.
    SweepHparams {
        #[arg(long, default_value_t = 12_000)]
        points: usize,
        #[arg(long = "test-points", default_value_t = 3000)]
        test_points: usize,
        #[arg(long, default_value_t = 600)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "results-dir", default_value = "results")]
        results_dir: PathBuf,
    },
}

fn filter_config(opts: &FilterOpts, items_hint: usize) -> FilterConfig {
    match opts.buckets {
        Some(buckets) => FilterConfig {
            bucket_count: buckets,
            entries_per_bucket: opts.entries_per_bucket,
            fingerprint_bits: opts.fp_bits,
            displacement_limit: 500,
        },
        None => FilterConfig::for_capacity(items_hint, opts.entries_per_bucket, opts.fp_bits),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenDataset { train, test, dim, classes, seed, out } => {
            let spec = GenSpec { n_train: train, n_test: test, dim, classes, seed };
            let (train_points, test_points) = dataset::gen_dataset(&spec);
            std::fs::create_dir_all(&out)?;
            let train_path = out.join("train.pods");
            let test_path = out.join("test.pods");
            dataset::write_dataset(&train_path, &train_points, dim, classes, seed)?;
            dataset::write_dataset(&test_path, &test_points, dim, classes, seed)?;
            report::print_table(
                &["file", "records", "dim", "classes"],
                &[
                    vec![
                        train_path.display().to_string(),
                        train_points.len().to_string(),
                        dim.to_string(),
                        classes.to_string(),
                    ],
                    vec![
                        test_path.display().to_string(),
                        test_points.len().to_string(),
                        dim.to_string(),
                        classes.to_string(),
                    ],
                ],
            );
        }
        Command::Setup { dataset: dataset_path, results_dir, train_opts, filter_opts } => {
            let (points, dim, _classes, _) = dataset::read_dataset(&dataset_path)
                .map_err(|e| anyhow::anyhow!("dataset load failed: {e}"))?;
            let cfg = SessionConfig {
                sid: SessionId(train_opts.seed),
                dims: Dims::new(dim, 128, 2),
                hp: Hyperparams {
                    batch_size: train_opts.batch,
                    epochs: train_opts.epochs,
                    learning_rate: train_opts.lr,
                    rng_seed: train_opts.seed,
                },
                n_shards: train_opts.shards,
                n_slices: train_opts.slices,
                m0_seed: train_opts.seed ^ 0xA5A5,
                plan_seed: train_opts.seed ^ 0x5A5A,
                filter: filter_config(&filter_opts, points.len()),
            };
            let mut s = DiskSession::create(&results_dir, cfg, &dataset_path, points)?;
            let challenge: Vec<f32> = s.points[0].features.clone();
            let points = s.points.clone();
            let outcome = setup_phase(
                &mut s.server,
                &mut s.verifier,
                &points,
                &challenge,
                &mut s.transcript,
            )?;
            s.save()?;
            report::print_table(
                &["assertion", "result"],
                &[
                    vec!["receipts".into(), format!("{} accepted", outcome.receipts.len())],
                    vec!["learn proof".into(), "accepted".into()],
                    vec!["predict proof".into(), "accepted".into()],
                    vec!["h_model".into(), hex::encode(outcome.learn.h_model)],
                    vec![
                        "trained submodels".into(),
                        outcome.timings.len().to_string(),
                    ],
                ],
            );
        }
        Command::Challenge { results_dir, index } => {
            let mut s = DiskSession::load(&results_dir)?;
            let idx = index.unwrap_or(1) % s.points.len();
            let challenge: Vec<f32> = s.points[idx].features.clone();
            let h_model = s
                .verifier
                .latest_h_model()
                .context("no learning proof on record; run setup first")?;
            let proof = s.server.on_prove_prediction(&challenge, &h_model)?;
            s.verifier
                .verify_predict(&proof, &challenge)
                .map_err(protocol::ProtocolError::Rejected)?;
            s.transcript.push(protocol::TranscriptRecord::Predict(proof.clone()));
            s.save()?;
            report::print_table(
                &["field", "value"],
                &[
                    vec!["challenge index".into(), idx.to_string()],
                    vec!["label".into(), proof.prediction.label.to_string()],
                    vec![
                        "scores".into(),
                        proof
                            .prediction
                            .scores
                            .iter()
                            .map(|v| format!("{v:.4}"))
                            .collect::<Vec<_>>()
                            .join(", "),
                    ],
                    vec!["verification".into(), "accepted".into()],
                ],
            );
        }
        Command::Delete { results_dir, kid, index, owner } => {
            let mut s = DiskSession::load(&results_dir)?;
            let mut kids: Vec<u64> = Vec::new();
            for k in &kid {
                kids.push(u64::from_str_radix(k.trim_start_matches("0x"), 16)?);
            }
            for &i in &index {
                kids.push(
                    s.points
                        .get(i)
                        .with_context(|| format!("dataset index {i} out of range"))?
                        .kid,
                );
            }
            if kids.is_empty() {
                bail!("nothing to delete: pass --kid or --index");
            }
            let request = DeletionRequest { kids: kids.clone(), requester: owner };
            let challenge: Vec<f32> = s.points[0].features.clone();
            let points = s.points.clone();
            let outcome = deletion_phase(
                &mut s.server,
                &mut s.verifier,
                &points,
                &request,
                &challenge,
                &mut s.transcript,
            )?;
            s.save()?;
            let mut rows = vec![
                vec!["deleted kids".into(), kids.iter().map(|k| format!("{k:#x}")).collect::<Vec<_>>().join(", ")],
                vec!["retrained submodels".into(), outcome.timings.len().to_string()],
                vec!["new h_model".into(), hex::encode(outcome.learn.h_model)],
            ];
            for m in &outcome.memberships {
                rows.push(vec![
                    format!("membership {:#x}", m.kid),
                    if m.present { "PRESENT (unexpected)".into() } else { "absent".into() },
                ]);
            }
            report::print_table(&["field", "value"], &rows);
        }
        Command::Audit { results_dir } => {
            let s = DiskSession::load(&results_dir)?;
            let transcript = Transcript::load(&s.transcript_path())?;
            let n = verify_transcript(
                s.server.public_key(),
                s.server.eid(),
                s.server.config().sid,
                s.server.programs(),
                &transcript,
            )?;
            let mut receipts = 0usize;
            let mut learns = 0usize;
            let mut predicts = 0usize;
            let mut members = 0usize;
            for r in &transcript.records {
                match r {
                    protocol::TranscriptRecord::Receipt(_) => receipts += 1,
                    protocol::TranscriptRecord::Learn(_) => learns += 1,
                    protocol::TranscriptRecord::Predict(_) => predicts += 1,
                    protocol::TranscriptRecord::Member(_) => members += 1,
                }
            }
            report::print_table(
                &["record type", "count", "verdict"],
                &[
                    vec!["receipt".into(), receipts.to_string(), "accepted".into()],
                    vec!["learn proof".into(), learns.to_string(), "accepted".into()],
                    vec!["predict proof".into(), predicts.to_string(), "accepted".into()],
                    vec!["membership".into(), members.to_string(), "accepted".into()],
                    vec!["total".into(), n.to_string(), "accepted".into()],
                ],
            );
        }
        Command::BenchFilter { items, negatives, reps, seed, filter_opts, results_dir } => {
            let config = filter_config(&filter_opts, items);
            let (ins, qry, del) = bench::bench_cuckoo_ops(items, config, reps, seed);
            let fpr = bench::measure_fpr(config, items, negatives, seed);
            report::print_table(
                &["metric", "value"],
                &[
                    vec!["items".into(), items.to_string()],
                    vec![
                        "buckets x entries x f".into(),
                        format!(
                            "{} x {} x {}",
                            config.bucket_count, config.entries_per_bucket, config.fingerprint_bits
                        ),
                    ],
                    vec!["load factor".into(), format!("{:.3}", fpr.load_factor)],
                    vec!["insert mean (us)".into(), report::us(ins.mean_us)],
                    vec!["query mean (us)".into(), report::us(qry.mean_us)],
                    vec!["delete mean (us)".into(), report::us(del.mean_us)],
                    vec!["insert failures".into(), fpr.insert_failures.to_string()],
                    vec![
                        "FPR".into(),
                        format!("{:.6} ({} / {})", fpr.fpr, fpr.false_positives, fpr.negatives),
                    ],
                ],
            );
            report::write_json(&results_dir, "bench_filter.json", &fpr)?;
        }
        Command::BenchMht { leaves, ops, reps, seed, fp_bits, results_dir } => {
            let cmp = bench::bench_compare(leaves, fp_bits, 4, reps, seed);
            report::print_table(
                &["structure", "insert/update (us)", "query (us)", "delete (us)"],
                &[
                    vec![
                        "cuckoo filter".into(),
                        report::us(cmp.cuckoo_insert.mean_us),
                        report::us(cmp.cuckoo_query.mean_us),
                        report::us(cmp.cuckoo_delete.mean_us),
                    ],
                    vec![
                        "MHT".into(),
                        report::us(cmp.mht_update.mean_us),
                        report::us(cmp.mht_query_with_path.mean_us),
                        report::us(cmp.mht_delete.mean_us),
                    ],
                    vec![
                        "speedup".into(),
                        format!("{:.0}x", cmp.speedup_insert),
                        format!("{:.0}x", cmp.speedup_query),
                        format!("{:.0}x", cmp.speedup_delete),
                    ],
                ],
            );
            println!("(mht ops sampled over {ops} random leaves)");
            report::write_json(&results_dir, "bench_mht.json", &cmp)?;
        }
        Command::BenchUnlearn { points, reps, train_opts, results_dir } => {
            let dims = Dims::new(100, 32, 2);
            let hp = Hyperparams {
                batch_size: train_opts.batch,
                epochs: train_opts.epochs,
                learning_rate: train_opts.lr,
                rng_seed: train_opts.seed,
            };
            let rows = bench::bench_unlearn(
                dims,
                points,
                train_opts.slices,
                hp,
                reps,
                train_opts.seed,
            );
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.position.to_string(),
                        r.retrained.to_string(),
                        report::us(r.retrain_us_mean),
                        report::us(r.checkpoint_restore_us_mean),
                        report::pct(r.overhead_fraction),
                    ]
                })
                .collect();
            report::print_table(
                &["deletion slice", "retrained", "retrain (us)", "ckpt+restore (us)", "overhead"],
                &table,
            );
            report::write_csv(&results_dir, "bench_unlearn.csv", &rows)?;
        }
        Command::BenchStorage { points, slices, seed, filter_opts, results_dir } => {
            let dims = Dims::purchase_default();
            let config = match filter_opts.buckets {
                Some(_) => filter_config(&filter_opts, points),
                None => FilterConfig {
                    bucket_count: 1 << 16,
                    entries_per_bucket: filter_opts.entries_per_bucket,
                    fingerprint_bits: filter_opts.fp_bits,
                    displacement_limit: 500,
                },
            };
            let r = bench::bench_storage(dims, points, slices, config, seed);
            report::print_table(
                &["structure", "measured", "reference"],
                &[
                    vec![
                        "key_list entry".into(),
                        format!("{} B", r.key_entry_bytes),
                        "52 B (416 bits)".into(),
                    ],
                    vec![
                        format!("key_list ({} entries)", r.key_list_entries),
                        format!("{} B", r.key_list_bytes_measured),
                        format!(
                            "{} B at {} entries",
                            r.key_list_bytes_at_shard_scale,
                            bench::SHARD_SCALE_ENTRIES
                        ),
                    ],
                    vec![
                        "filter bucket array".into(),
                        format!("{} B", r.filter_payload_bytes),
                        format!("{} B = buckets*entries*f/8", r.filter_formula_bytes),
                    ],
                    vec![
                        format!("model_link ({} submodels)", r.n_submodels),
                        format!("{} B", r.model_link_live_bytes),
                        format!("{} B/record", r.model_record_expected_bytes),
                    ],
                    vec![
                        format!("data_store ({} points)", r.data_points),
                        format!("{} B", r.data_store_bytes),
                        String::new(),
                    ],
                ],
            );
            report::write_json(&results_dir, "bench_storage.json", &r)?;
        }
        Command::AttackSim { trials, seed, results_dir } => {
            let reports = attack::run_all(trials, seed);
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    vec![
                        r.strategy.to_string(),
                        format!("{}/{}", r.rejected, r.trials),
                        report::pct(r.detection_rate),
                        format!("{:.4}", 1.0 - r.fpr_bound),
                    ]
                })
                .collect();
            report::print_table(
                &["strategy", "rejected", "detection rate", "1 - FPR bound"],
                &rows,
            );
            report::write_csv(&results_dir, "attack_sim.csv", &reports)?;
            if reports.iter().any(|r| r.rejected != r.trials) {
                bail!("one or more attack strategies were not rejected");
            }
            println!("all {} strategies rejected in every trial", reports.len());
        }
        Command::SweepSlices {
            points,
            test_points,
            dim,
            base_epochs,
            shards,
            parallel_shards,
            seed,
            results_dir,
        } => {
            let spec = GenSpec {
                n_train: points,
                n_test: test_points,
                dim,
                classes: 2,
                seed,
            };
            let (train, test) = dataset::gen_dataset(&spec);
            let dims = Dims::new(dim, 128, 2);
            let hp = Hyperparams {
                batch_size: 100,
                epochs: base_epochs,
                learning_rate: 0.02,
                rng_seed: seed,
            };
            let rows = bench::sweep_slices(
                &train,
                &test,
                dims,
                &[1, 3, 6, 12],
                base_epochs,
                hp,
                shards,
                parallel_shards,
                seed,
            );
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.n_slices.to_string(),
                        r.epochs_per_step.to_string(),
                        format!("{:.2}s", r.train_seconds),
                        report::pct(r.test_accuracy),
                    ]
                })
                .collect();
            report::print_table(&["slices", "epochs/step", "train time", "accuracy"], &table);
            report::write_csv(&results_dir, "sweep_slices.csv", &rows)?;
            let max = rows.iter().map(|r| r.test_accuracy).fold(f64::MIN, f64::max);
            let min = rows.iter().map(|r| r.test_accuracy).fold(f64::MAX, f64::min);
            println!("accuracy spread: {:.2} points", (max - min) * 100.0);
        }
        Command::SweepHparams { points, test_points, dim, seed, results_dir } => {
            let spec = GenSpec {
                n_train: points,
                n_test: test_points,
                dim,
                classes: 2,
                seed,
            };
            let (train, test) = dataset::gen_dataset(&spec);
            let dims = Dims::new(dim, 128, 2);
            // Epoch axis at fixed batch 1000, then batch axis at fixed epochs.
            let combos = [(5u32, 1000usize), (10, 1000), (22, 1000), (20, 5000), (20, 2000)];
            let rows = bench::sweep_hparams(&train, &test, dims, &combos, 0.02, seed);
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.epochs.to_string(),
                        r.batch_size.to_string(),
                        format!("{:.2}s", r.train_seconds),
                        report::pct(r.test_accuracy),
                    ]
                })
                .collect();
            report::print_table(&["epochs", "batch", "train time", "accuracy"], &table);
            report::write_csv(&results_dir, "sweep_hparams.csv", &rows)?;
        }
    }
    Ok(())
}
