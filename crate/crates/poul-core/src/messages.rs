//! Signed protocol messages and their canonical signing payloads.
//!
//! Every signature binds a domain tag, the session id and the enclave
//! identity in addition to the message contents, so proofs cannot be
//! replayed across sessions or enclave instances.

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, sha256_parts};
use crate::ml::Prediction;

/// Protocol session identifier; lives inside every signed payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

/// 8-byte program identifiers for attestation binding.
pub mod prog_id {
    pub const PROG_K: [u8; 8] = *b"prog_k\0\0";
    pub const PROG_C: [u8; 8] = *b"prog_c\0\0";
    pub const PROG_T: [u8; 8] = *b"prog_t\0\0";
    pub const PROG_P: [u8; 8] = *b"prog_p\0\0";
    pub const PROG_AUDIT: [u8; 8] = *b"prog_a\0\0";
}

mod domain {
    pub const ATTEST: &[u8] = b"poul.attest.v1";
    pub const RECEIPT: &[u8] = b"poul.receipt.v1";
    pub const LEARN: &[u8] = b"poul.learn.v1";
    pub const PREDICT: &[u8] = b"poul.predict.v1";
    pub const MEMBER: &[u8] = b"poul.member.v1";
    pub const H_MODEL: &[u8] = b"poul.hmodel.v1";
}

pub(crate) fn hex32<S: serde::Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(v))
}

pub(crate) fn unhex32<'de, D: serde::Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
    let s: String = serde::Deserialize::deserialize(d)?;
    let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
    v.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))
}

pub(crate) fn hex64<S: serde::Serializer>(v: &[u8; 64], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(v))
}

pub(crate) fn unhex64<'de, D: serde::Deserializer<'de>>(d: D) -> Result<[u8; 64], D::Error> {
    let s: String = serde::Deserialize::deserialize(d)?;
    let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
    v.try_into().map_err(|_| serde::de::Error::custom("expected 64 bytes"))
}

/// Generic F_SGX attestation over a resume output.
///
/// Wire format: `eid(32) | prog_id(8) | output_hash(32) | sigma(64)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub eid: [u8; 32],
    pub prog_id: [u8; 8],
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub output_hash: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma: [u8; 64],
}

impl Attestation {
    pub const WIRE_LEN: usize = 32 + 8 + 32 + 64;

    pub fn signing_payload(eid: &[u8; 32], prog_id: &[u8; 8], output_hash: &[u8; 32]) -> Vec<u8> {
        let mut p = Vec::with_capacity(domain::ATTEST.len() + 72);
        p.extend_from_slice(domain::ATTEST);
        p.extend_from_slice(eid);
        p.extend_from_slice(prog_id);
        p.extend_from_slice(output_hash);
        p
    }

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[0..32].copy_from_slice(&self.eid);
        out[32..40].copy_from_slice(&self.prog_id);
        out[40..72].copy_from_slice(&self.output_hash);
        out[72..136].copy_from_slice(&self.sigma);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::WIRE_LEN {
            return None;
        }
        Some(Self {
            eid: bytes[0..32].try_into().unwrap(),
            prog_id: bytes[32..40].try_into().unwrap(),
            output_hash: bytes[40..72].try_into().unwrap(),
            sigma: bytes[72..136].try_into().unwrap(),
        })
    }
}

/// Commit receipt: sigma_d binds the filter state (and key-list digest) to
/// the committing programs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub sid: SessionId,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub eid: [u8; 32],
    /// Digest of the filter's canonical serialization (h_c).
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub h_c: [u8; 32],
    /// Digest of the in-enclave key list, bound alongside the filter.
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub key_list_digest: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma_d: [u8; 64],
}

impl Receipt {
    pub fn signing_payload(
        sid: SessionId,
        eid: &[u8; 32],
        h_c: &[u8; 32],
        key_list_digest: &[u8; 32],
        prog_c_hash: &[u8; 32],
        prog_k_hash: &[u8; 32],
    ) -> Vec<u8> {
        let mut p = Vec::with_capacity(200);
        p.extend_from_slice(domain::RECEIPT);
        p.extend_from_slice(&sid.0.to_le_bytes());
        p.extend_from_slice(eid);
        p.extend_from_slice(h_c);
        p.extend_from_slice(key_list_digest);
        p.extend_from_slice(prog_c_hash);
        p.extend_from_slice(prog_k_hash);
        p
    }
}

/// Learning proof: sigma_m binds the chain-final model digest to the filter
/// state it was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnProof {
    pub sid: SessionId,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub eid: [u8; 32],
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub c_digest: [u8; 32],
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub h_model: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma_m: [u8; 64],
}

impl LearnProof {
    pub fn signing_payload(
        sid: SessionId,
        eid: &[u8; 32],
        c_digest: &[u8; 32],
        h_model: &[u8; 32],
        prog_t_hash: &[u8; 32],
    ) -> Vec<u8> {
        let mut p = Vec::with_capacity(160);
        p.extend_from_slice(domain::LEARN);
        p.extend_from_slice(&sid.0.to_le_bytes());
        p.extend_from_slice(eid);
        p.extend_from_slice(c_digest);
        p.extend_from_slice(h_model);
        p.extend_from_slice(prog_t_hash);
        p
    }
}

/// Prediction proof: sigma_p binds the prediction to the committed model
/// digest and the exact test input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictProof {
    pub sid: SessionId,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub eid: [u8; 32],
    pub prediction: Prediction,
    pub test: Vec<f32>,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub h_model: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma_p: [u8; 64],
}

/// Canonical bytes of a test input (little-endian f32 sequence).
pub fn test_input_bytes(test: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(test.len() * 4);
    for v in test {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

impl PredictProof {
    pub fn signing_payload(
        sid: SessionId,
        eid: &[u8; 32],
        prediction: &Prediction,
        test: &[f32],
        h_model: &[u8; 32],
        prog_p_hash: &[u8; 32],
    ) -> Vec<u8> {
        let mut p = Vec::with_capacity(190);
        p.extend_from_slice(domain::PREDICT);
        p.extend_from_slice(&sid.0.to_le_bytes());
        p.extend_from_slice(eid);
        p.extend_from_slice(&sha256(&prediction.canonical_bytes()));
        p.extend_from_slice(&sha256(&test_input_bytes(test)));
        p.extend_from_slice(h_model);
        p.extend_from_slice(prog_p_hash);
        p
    }
}

/// Attested membership answer for one (kid, data) pair against the current
/// filter state; used after deletions to show the fingerprint is gone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipProof {
    pub sid: SessionId,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub eid: [u8; 32],
    pub kid: u64,
    pub present: bool,
    #[serde(serialize_with = "hex32", deserialize_with = "unhex32")]
    pub c_digest: [u8; 32],
    #[serde(serialize_with = "hex64", deserialize_with = "unhex64")]
    pub sigma: [u8; 64],
}

impl MembershipProof {
    pub fn signing_payload(
        sid: SessionId,
        eid: &[u8; 32],
        kid: u64,
        present: bool,
        c_digest: &[u8; 32],
    ) -> Vec<u8> {
        let mut p = Vec::with_capacity(128);
        p.extend_from_slice(domain::MEMBER);
        p.extend_from_slice(&sid.0.to_le_bytes());
        p.extend_from_slice(eid);
        p.extend_from_slice(&kid.to_le_bytes());
        p.push(present as u8);
        p.extend_from_slice(c_digest);
        p
    }
}

/// Combined model digest over the per-shard chain-final freshness MACs.
/// With one shard this is a hash of that shard's `H(model | seed)`.
pub fn compose_h_model(final_macs: &[[u8; 32]]) -> [u8; 32] {
    let n = (final_macs.len() as u64).to_le_bytes();
    let mut parts: Vec<&[u8]> = Vec::with_capacity(final_macs.len() + 2);
    parts.push(domain::H_MODEL);
    parts.push(&n);
    for mac in final_macs {
        parts.push(mac);
    }
    sha256_parts(&parts)
}
