//! On-disk session state for the CLI: the sealed enclave, the two store
//! files, the shard plan, the verifier's pinned keys and latest digests,
//! and the running transcript.
//!
//! The sealing key is written to a separate `platform_key.bin`, standing in
//! for the hardware fuse key a real enclave would seal against.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use poul_core::VerifyingKey;
use serde::{Deserialize, Serialize};

use poul_core::auth::{DataStore, ModelLinkStore};
use poul_core::dataset;
use poul_core::enclave::{Enclave, OutStores};
use poul_core::messages::SessionId;
use poul_core::protocol::{Server, SessionConfig, Transcript, Verifier};
use poul_core::sisa::{DataPoint, ShardPlan};

const SESSION_FILE: &str = "session.json";
const VERIFIER_FILE: &str = "verifier.json";
const PLATFORM_KEY_FILE: &str = "platform_key.bin";
const SEALED_FILE: &str = "enclave.sealed";
const DATA_STORE_FILE: &str = "data_store.bin";
const MODEL_LINK_FILE: &str = "model_link.bin";
const TRANSCRIPT_FILE: &str = "transcript.jsonl";
const FILTER_FILE: &str = "filter.bin";

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    cfg: SessionConfig,
    plan: ShardPlan,
    dataset_path: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct VerifierState {
    pk: String,
    eid: String,
    sid: u64,
    latest_h_c: Option<String>,
    latest_h_model: Option<String>,
    sig_checks: u64,
}

/// A persisted protocol session rooted at a results directory.
pub struct DiskSession {
    pub dir: PathBuf,
    pub server: Server,
    pub verifier: Verifier,
    pub points: Vec<DataPoint>,
    pub transcript: Transcript,
    dataset_path: PathBuf,
}

impl DiskSession {
    pub fn transcript_path(&self) -> PathBuf {
        self.dir.join(TRANSCRIPT_FILE)
    }

    /// Creates a new session directory around a freshly initialized server.
    pub fn create(
        dir: &Path,
        cfg: SessionConfig,
        dataset_path: &Path,
        points: Vec<DataPoint>,
    ) -> Result<Self> {
        fs::create_dir_all(dir)?;
        if dir.join(SESSION_FILE).exists() {
            bail!("results dir {} already holds a session", dir.display());
        }
        let server = Server::new(cfg.clone(), None);
        let verifier =
            Verifier::new(server.public_key(), server.eid(), cfg.sid, server.programs());
        Ok(Self {
            dir: dir.to_path_buf(),
            server,
            verifier,
            points,
            transcript: Transcript::new(),
            dataset_path: dataset_path.to_path_buf(),
        })
    }

    /// Persists everything: sealed enclave, stores, plan, verifier state,
    /// transcript, and the public filter snapshot.
    pub fn save(&self) -> Result<()> {
        let plan = self
            .server
            .plan()
            .context("session has no shard plan yet; run setup first")?
            .clone();
        let meta = SessionMeta {
            cfg: self.server.config().clone(),
            plan,
            dataset_path: self.dataset_path.clone(),
        };
        fs::write(self.dir.join(SESSION_FILE), serde_json::to_vec_pretty(&meta)?)?;

        fs::write(self.dir.join(PLATFORM_KEY_FILE), self.server.enclave().sealing_key())?;
        fs::write(self.dir.join(SEALED_FILE), self.server.enclave().seal_state())?;
        self.server.stores.data.save(&self.dir.join(DATA_STORE_FILE))?;
        self.server.stores.models.save(&self.dir.join(MODEL_LINK_FILE))?;
        self.transcript.save(&self.dir.join(TRANSCRIPT_FILE))?;
        if let Ok(snapshot) = self.server.filter_snapshot() {
            fs::write(self.dir.join(FILTER_FILE), snapshot)?;
        }

        let vs = VerifierState {
            pk: hex::encode(self.server.public_key().to_bytes()),
            eid: hex::encode(self.server.eid()),
            sid: self.server.config().sid.0,
            latest_h_c: self.verifier.latest_h_c().map(hex::encode),
            latest_h_model: self.verifier.latest_h_model().map(hex::encode),
            sig_checks: self.verifier.sig_check_count(),
        };
        fs::write(self.dir.join(VERIFIER_FILE), serde_json::to_vec_pretty(&vs)?)?;
        Ok(())
    }

    /// Restores a session: unseals the enclave with the platform key and
    /// reattaches the store files and verifier state.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SessionMeta =
            serde_json::from_slice(&fs::read(dir.join(SESSION_FILE)).with_context(|| {
                format!("no session in {}; run `poul setup` first", dir.display())
            })?)?;
        let platform_key: [u8; 32] = fs::read(dir.join(PLATFORM_KEY_FILE))?
            .try_into()
            .map_err(|_| anyhow::anyhow!("platform key has wrong length"))?;
        let sealed = fs::read(dir.join(SEALED_FILE))?;
        let enclave = Enclave::unseal_state(&platform_key, &sealed)
            .map_err(|e| anyhow::anyhow!("unseal failed: {e}"))?;
        let stores = OutStores {
            data: DataStore::load(&dir.join(DATA_STORE_FILE))?,
            models: ModelLinkStore::load(&dir.join(MODEL_LINK_FILE))?,
        };
        let (points, _, _, _) = dataset::read_dataset(&meta.dataset_path)
            .map_err(|e| anyhow::anyhow!("dataset reload failed: {e}"))?;
        let server =
            Server::from_parts(meta.cfg.clone(), enclave, stores, meta.plan, &points);

        let vs: VerifierState = serde_json::from_slice(&fs::read(dir.join(VERIFIER_FILE))?)?;
        let pk_bytes: [u8; 32] = hex::decode(&vs.pk)?
            .try_into()
            .map_err(|_| anyhow::anyhow!("bad pk length"))?;
        let pk = VerifyingKey::from_bytes(&pk_bytes)?;
        let eid: [u8; 32] = hex::decode(&vs.eid)?
            .try_into()
            .map_err(|_| anyhow::anyhow!("bad eid length"))?;
        let mut verifier = Verifier::new(pk, eid, SessionId(vs.sid), server.programs());
        verifier.restore_state(
            decode_opt32(&vs.latest_h_c)?,
            decode_opt32(&vs.latest_h_model)?,
            vs.sig_checks,
        );

        let transcript = Transcript::load(&dir.join(TRANSCRIPT_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            server,
            verifier,
            points,
            transcript,
            dataset_path: meta.dataset_path,
        })
    }
}

fn decode_opt32(v: &Option<String>) -> Result<Option<[u8; 32]>> {
    match v {
        None => Ok(None),
        Some(s) => {
            let bytes: [u8; 32] = hex::decode(s)?
                .try_into()
                .map_err(|_| anyhow::anyhow!("bad digest length"))?;
            Ok(Some(bytes))
        }
    }
}
