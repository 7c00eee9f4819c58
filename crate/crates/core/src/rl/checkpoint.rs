//! Binary agent checkpoints tied to the configuration that produced them.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::sac::{Agent, SacConfig, ScalarAdam};
use super::state::Method;
use crate::nn::{read_f64s, read_u64, write_f64s, Adam, Mlp, Normalizer};
use crate::scenario::ScenarioConfig;

const MAGIC: &[u8; 8] = b"CARSCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint was produced by a different configuration")]
    ConfigMismatch,
}

/// Digest of everything that shapes training: scenario, method and SAC
/// hyperparameters.
pub fn config_hash(scenario: &ScenarioConfig, method: Method, sac: &SacConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(scenario.to_toml().as_bytes());
    h.update(method.name().as_bytes());
    h.update(serde_json::to_string(sac).expect("config serialises").as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    method: Method,
    sac: SacConfig,
    episodes_done: u64,
    decisions_done: u64,
    replay_len: u64,
    updates: u64,
    skipped_updates: u64,
    log_alpha: f64,
    opt_alpha: ScalarAdam,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub agent: Agent,
    pub method: Method,
    pub config_hash: [u8; 32],
    pub episodes_done: u64,
    pub decisions_done: u64,
    /// Replay size at save time; the buffer itself is not stored.
    pub replay_len: u64,
}

impl Checkpoint {
    pub fn write_to(&self, w: impl Write) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(w);
        let a = &self.agent;
        let meta = Meta {
            method: self.method,
            sac: a.cfg.clone(),
            episodes_done: self.episodes_done,
            decisions_done: self.decisions_done,
            replay_len: self.replay_len,
            updates: a.updates,
            skipped_updates: a.skipped_updates,
            log_alpha: a.log_alpha,
            opt_alpha: a.opt_alpha,
            rng_seed: a.rng.get_seed(),
            rng_stream: a.rng.get_stream(),
            rng_word_pos: a.rng.get_word_pos(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        // Scalars bit-exact, independent of the JSON float printer.
        write_f64s(&mut w, &[a.log_alpha, a.opt_alpha.m, a.opt_alpha.v])?;
        a.obs_norm.write_to(&mut w)?;
        for net in [&a.actor, &a.q1, &a.q2, &a.q1_target, &a.q2_target] {
            net.write_to(&mut w)?;
        }
        for opt in [&a.opt_actor, &a.opt_q1, &a.opt_q2] {
            opt.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("not an agent checkpoint".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        if u32::from_le_bytes(v) != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {}", u32::from_le_bytes(v))));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let n = read_u64(&mut r)? as usize;
        if n > 1 << 20 {
            return Err(CheckpointError::Format("metadata too large".into()));
        }
        let mut json = vec![0u8; n];
        r.read_exact(&mut json)?;
        let meta: Meta = serde_json::from_slice(&json).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let scalars = read_f64s(&mut r, 3)?;
        let obs_norm = Normalizer::read_from(&mut r)?;
        let mut nets = Vec::with_capacity(5);
        for _ in 0..5 {
            nets.push(Mlp::read_from(&mut r)?);
        }
        let mut opts = Vec::with_capacity(3);
        for _ in 0..3 {
            opts.push(Adam::read_from(&mut r)?);
        }
        let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(meta.rng_word_pos);
        let [actor, q1, q2, q1_target, q2_target]: [Mlp; 5] = nets.try_into().expect("five nets");
        let [opt_actor, opt_q1, opt_q2]: [Adam; 3] = opts.try_into().expect("three optimisers");
        if actor.input_dim() != obs_norm.dim() || q1.input_dim() != obs_norm.dim() + 1 || actor.output_dim() != 2 {
            return Err(CheckpointError::Format("network shapes disagree".into()));
        }
        let agent = Agent {
            cfg: meta.sac,
            actor,
            q1,
            q2,
            q1_target,
            q2_target,
            opt_actor,
            opt_q1,
            opt_q2,
            log_alpha: scalars[0],
            opt_alpha: ScalarAdam { t: meta.opt_alpha.t, m: scalars[1], v: scalars[2] },
            obs_norm,
            rng,
            updates: meta.updates,
            skipped_updates: meta.skipped_updates,
        };
        Ok(Self {
            agent,
            method: meta.method,
            config_hash,
            episodes_done: meta.episodes_done,
            decisions_done: meta.decisions_done,
            replay_len: meta.replay_len,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        self.write_to(std::fs::File::create(&tmp)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Load and require the checkpoint to match `expected`.
    pub fn load_matching(path: &Path, expected: &[u8; 32]) -> Result<Self, CheckpointError> {
        let c = Self::load(path)?;
        if &c.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch);
        }
        Ok(c)
    }
}
