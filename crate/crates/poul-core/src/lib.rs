//! Proof-of-unlearning core library.
//!
//! Implements a SISA sharded/sliced incremental trainer with exact
//! (bit-reproducible) unlearning, a memory-efficient authenticated lineage
//! layer (cuckoo filter, key list, MAC'd stores), a simulated
//! trusted-execution enclave with signature attestation, the
//! commit-and-prove protocol binding them together, an auditing enclave,
//! and a Merkle-tree baseline for comparison benchmarks.

pub mod audit;
pub mod auth;
pub mod crypto;
pub mod dataset;
pub mod enclave;
pub mod filter;
pub mod messages;
pub mod mht;
pub mod ml;
pub mod protocol;
pub mod sisa;

pub use ed25519_dalek::{Signature, VerifyingKey};
