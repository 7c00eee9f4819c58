//! Episode loop for training the machine policy.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{config_hash, Checkpoint};
use super::sac::{critic_input, Agent, Replay, SacConfig, UpdateReport};
use super::state::{Method, OBS_DIM};
use crate::env::{Env, EnvError, EnvOptions, TerminalCause};
use crate::harness::metrics::episode_nsad;
use crate::harness::sub_seed;
use crate::nn::{Adam, AdamConfig, Normalizer};
use crate::scenario::ScenarioConfig;
use crate::value::ValueSource;

const PRETRAIN_STREAM: u64 = 0x5052_4554;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("checkpoint does not match this configuration")]
    Mismatch,
}

/// Fits the target critics to a value-derived prior before online learning,
/// so that early bootstrapped targets already rank unsafe actions low.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Random-policy episodes used for the prior; 0 disables pretraining.
    pub episodes: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Target is `-scale · Q - offset`.
    pub scale: f64,
    pub offset: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { episodes: 20, epochs: 30, lr: 1e-3, scale: 2.0, offset: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    pub method: Method,
    pub sac: SacConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { episodes: 1500, seed: 0, method: Method::Proposed, sac: SacConfig::default(), pretrain: PretrainConfig::default() }
    }
}

impl TrainConfig {
    pub fn desk(method: Method, seed: u64) -> Self {
        Self { method, seed, sac: SacConfig { seed, ..SacConfig::desk() }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.sac.validate().map_err(TrainError::Config)?;
        let p = &self.pretrain;
        if p.episodes > 0 && (p.epochs == 0 || !(p.lr > 0.0) || !p.scale.is_finite() || !p.offset.is_finite()) {
            return Err(TrainError::Config(format!("bad pretraining configuration: {p:?}")));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub seed: u64,
    pub method: Method,
    pub cai: f64,
    /// Return under the method's own reward.
    pub episode_return: f64,
    /// Return under the shared value-based reward.
    pub common_return: f64,
    pub success: bool,
    pub terminal: TerminalCause,
    pub decisions: usize,
    pub forward_distance: f64,
    pub nsad: Option<f64>,
    pub alpha: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub wall_ms: f64,
}

/// Final-window averages of the training curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveTail {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_common_return: f64,
    pub success_rate: f64,
}

pub fn curve_tail(history: &[EpisodeSummary], window: usize) -> CurveTail {
    let tail = &history[history.len().saturating_sub(window)..];
    if tail.is_empty() {
        return CurveTail::default();
    }
    let n = tail.len() as f64;
    CurveTail {
        episodes: tail.len(),
        mean_return: tail.iter().map(|e| e.episode_return).sum::<f64>() / n,
        mean_common_return: tail.iter().map(|e| e.common_return).sum::<f64>() / n,
        success_rate: tail.iter().filter(|e| e.success).count() as f64 / n,
    }
}

pub struct Trainer<'a> {
    pub cfg: &'a ScenarioConfig,
    pub value: &'a dyn ValueSource,
    pub tc: TrainConfig,
    pub agent: Agent,
    pub replay: Replay,
    pub episodes_done: u64,
    pub decisions_done: u64,
    pub history: Vec<EpisodeSummary>,
    normalizer_ready: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ScenarioConfig, value: &'a dyn ValueSource, tc: TrainConfig) -> Result<Self, TrainError> {
        tc.validate()?;
        cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let agent = Agent::new(tc.sac.clone(), OBS_DIM);
        let replay = Replay::new(tc.sac.replay_capacity);
        Ok(Self { cfg, value, tc, agent, replay, episodes_done: 0, decisions_done: 0, history: Vec::new(), normalizer_ready: false })
    }

    /// Continue from a checkpoint; the replay buffer starts empty and is
    /// refilled with random actions for one warmup period.
    pub fn resume(cfg: &'a ScenarioConfig, value: &'a dyn ValueSource, tc: TrainConfig, ck: Checkpoint) -> Result<Self, TrainError> {
        if ck.config_hash != config_hash(cfg, tc.method, &tc.sac) {
            return Err(TrainError::Mismatch);
        }
        let mut t = Self::new(cfg, value, tc)?;
        t.agent = ck.agent;
        t.episodes_done = ck.episodes_done;
        t.decisions_done = 0;
        t.normalizer_ready = true;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agent: self.agent.clone(),
            method: self.tc.method,
            config_hash: config_hash(self.cfg, self.tc.method, &self.tc.sac),
            episodes_done: self.episodes_done,
            decisions_done: self.decisions_done,
            replay_len: self.replay.len() as u64,
        }
    }

    fn episode_seed(&self, i: u64) -> u64 {
        sub_seed(self.tc.seed, i)
    }

    /// Run random-policy episodes, fit the observation normaliser on them and
    /// regress both target critics onto the value prior.
    pub fn pretrain(&mut self) -> Result<f64, TrainError> {
        let p = self.tc.pretrain.clone();
        if p.episodes == 0 {
            return Ok(0.0);
        }
        let dm = self.cfg.vehicle.delta_max;
        let mut obs = Vec::new();
        let mut acts = Vec::new();
        let mut targets = Vec::new();
        for i in 0..p.episodes as u64 {
            let seed = sub_seed(self.tc.seed ^ PRETRAIN_STREAM, i);
            let mut env = match Env::new(self.cfg, self.value, EnvOptions::training(self.tc.method), seed) {
                Ok(e) => e,
                Err(EnvError::Rejected(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            env.run_until_decision()?;
            while !env.is_done() {
                let o = env.observation();
                let a: f64 = self.agent.rng.random_range(-1.0..=1.0);
                let q = env.action_value(a * dm);
                obs.push(o);
                acts.push(a);
                targets.push(-p.scale * q - p.offset);
                let tr = env.decide(a * dm)?;
                let o2 = env.observation();
                self.replay.push(o, a, tr.reward, o2, tr.done);
            }
        }
        if obs.is_empty() {
            return Ok(0.0);
        }
        self.fit_normalizer(&obs);
        let n = obs.len();
        let mut x = Array2::zeros((n, OBS_DIM));
        for (i, mut o) in obs.into_iter().enumerate() {
            self.agent.obs_norm.apply(&mut o);
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&o[..]));
        }
        let xin = critic_input(x.view(), &acts);
        let b = self.tc.sac.batch.min(n);
        let mut loss = 0.0;
        for net in [&mut self.agent.q1_target, &mut self.agent.q2_target] {
            let mut opt = Adam::new(AdamConfig { lr: p.lr, ..AdamConfig::default() }, net);
            for _ in 0..p.epochs {
                let mut order: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    order.swap(i, self.agent.rng.random_range(0..=i));
                }
                loss = 0.0;
                for chunk in order.chunks(b) {
                    let rows = xin.select(ndarray::Axis(0), chunk);
                    let y: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                    let (l, g) = super::sac::critic_loss_grads(net, rows.view(), &y);
                    opt.step(net, &g);
                    loss += l * chunk.len() as f64 / n as f64;
                }
            }
        }
        Ok(loss)
    }

    fn fit_normalizer(&mut self, obs: &[[f64; OBS_DIM]]) {
        let m = Array2::from_shape_fn((obs.len(), OBS_DIM), |(i, j)| obs[i][j]);
        self.agent.obs_norm = Normalizer::fit(m.view());
        self.normalizer_ready = true;
    }

    fn learning(&self) -> bool {
        self.normalizer_ready && self.replay.len() >= self.tc.sac.batch && self.decisions_done >= self.tc.sac.warmup as u64
    }

    /// Train one episode. Rejected spawns count as an episode with no
    /// decisions and are skipped.
    pub fn run_episode(&mut self) -> Result<Option<EpisodeSummary>, TrainError> {
        let started = Instant::now();
        let idx = self.episodes_done;
        self.episodes_done += 1;
        let seed = self.episode_seed(idx);
        let mut env = match Env::new(self.cfg, self.value, EnvOptions::training(self.tc.method), seed) {
            Ok(e) => e,
            Err(EnvError::Rejected(m)) => {
                log::warn!("episode {idx} skipped: {m}");
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let dm = self.cfg.vehicle.delta_max;
        let mut ret = 0.0;
        let mut losses = UpdateReport::default();
        let mut n_updates = 0usize;
        env.run_until_decision()?;
        while !env.is_done() {
            let o = env.observation();
            let a = if self.decisions_done < self.tc.sac.warmup as u64 || !self.normalizer_ready {
                self.agent.rng.random_range(-1.0..=1.0)
            } else {
                self.agent.act(&o, false)
            };
            let tr = env.decide(a * dm)?;
            ret += tr.reward;
            let o2 = env.observation();
            self.replay.push(o, a, tr.reward, o2, tr.done);
            self.decisions_done += 1;
            if !self.normalizer_ready && self.decisions_done >= self.tc.sac.warmup as u64 {
                let obs = self.replay.obs.clone();
                self.fit_normalizer(&obs);
            }
            if self.learning() {
                for _ in 0..self.tc.sac.updates_per_decision {
                    let r = self.agent.update(&self.replay);
                    if !r.skipped {
                        losses.critic_loss += r.critic_loss;
                        losses.actor_loss += r.actor_loss;
                        n_updates += 1;
                    }
                }
            }
        }
        let log = env.into_log();
        let k = n_updates.max(1) as f64;
        let summary = EpisodeSummary {
            episode: idx,
            seed,
            method: self.tc.method,
            cai: log.cai_episode,
            episode_return: ret,
            common_return: log.common_return(self.cfg),
            success: !log.collided(),
            terminal: log.terminal,
            decisions: log.decisions.len(),
            forward_distance: log.forward_distance(),
            nsad: episode_nsad(&log).map(|(m, _)| m),
            alpha: self.agent.alpha(),
            critic_loss: losses.critic_loss / k,
            actor_loss: losses.actor_loss / k,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.history.push(summary.clone());
        Ok(Some(summary))
    }

    /// Pretrain (fresh runs only) and train until `tc.episodes` episodes have
    /// been run in total.
    pub fn run(&mut self, on_episode: &mut dyn FnMut(&EpisodeSummary)) -> Result<(), TrainError> {
        if self.episodes_done == 0 && !self.normalizer_ready {
            let loss = self.pretrain()?;
            log::info!("pretrained target critics, final loss {loss:.4}");
        }
        while self.episodes_done < self.tc.episodes as u64 {
            if let Some(s) = self.run_episode()? {
                on_episode(&s);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::ConstraintProxy;

    fn tiny(method: Method) -> TrainConfig {
        TrainConfig {
            episodes: 3,
            seed: 5,
            method,
            sac: SacConfig { hidden: vec![8], batch: 16, warmup: 20, ..SacConfig::desk() },
            pretrain: PretrainConfig { episodes: 1, epochs: 2, ..PretrainConfig::default() },
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let cfg = ScenarioConfig::canonical();
        let value = ConstraintProxy::new(&cfg);
        let run = || {
            let mut t = Trainer::new(&cfg, &value, tiny(Method::Proposed)).unwrap();
            t.run(&mut |_| {}).unwrap();
            t
        };
        let (a, b) = (run(), run());
        assert_eq!(a.agent, b.agent);
        let strip = |h: &[EpisodeSummary]| h.iter().map(|e| EpisodeSummary { wall_ms: 0.0, ..e.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.history.len(), 3);
        assert!(a.agent.updates > 0);
    }

    #[test]
    fn every_method_trains() {
        let cfg = ScenarioConfig::canonical();
        let value = ConstraintProxy::new(&cfg);
        for m in Method::ALL {
            let mut t = Trainer::new(&cfg, &value, TrainConfig { episodes: 2, ..tiny(m) }).unwrap();
            t.run(&mut |s| assert!(s.episode_return.is_finite())).unwrap();
        }
    }

    #[test]
    fn resume_requires_matching_config() {
        let cfg = ScenarioConfig::canonical();
        let value = ConstraintProxy::new(&cfg);
        let mut t = Trainer::new(&cfg, &value, tiny(Method::Proposed)).unwrap();
        t.run(&mut |_| {}).unwrap();
        let ck = t.checkpoint();
        assert!(matches!(Trainer::resume(&cfg, &value, tiny(Method::PlainSac), ck.clone()), Err(TrainError::Mismatch)));
        let mut r = Trainer::resume(&cfg, &value, TrainConfig { episodes: 4, ..tiny(Method::Proposed) }, ck).unwrap();
        r.run(&mut |_| {}).unwrap();
        assert_eq!(r.episodes_done, 4);
    }

    #[test]
    fn tail_averages_last_window() {
        let mk = |r: f64, s: bool| EpisodeSummary {
            episode: 0,
            seed: 0,
            method: Method::Proposed,
            cai: 0.3,
            episode_return: r,
            common_return: r,
            success: s,
            terminal: TerminalCause::Horizon,
            decisions: 1,
            forward_distance: 0.0,
            nsad: None,
            alpha: 0.1,
            critic_loss: 0.0,
            actor_loss: 0.0,
            wall_ms: 0.0,
        };
        let h = vec![mk(-100.0, false), mk(1.0, true), mk(3.0, false)];
        let t = curve_tail(&h, 2);
        assert_eq!(t.mean_return, 2.0);
        assert_eq!(t.success_rate, 0.5);
    }
}
