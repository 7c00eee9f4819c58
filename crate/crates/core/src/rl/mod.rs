//! Reward shaping, observations and the soft actor-critic agent.

pub mod checkpoint;
pub mod reward;
pub mod sac;
pub mod state;
pub mod train;

pub use reward::{safety_reward, step_reward, terminal_reward, RewardParams, StepReward};
pub use state::{build_obs, Method, ObsInputs, OBS_DIM};
pub use sac::{actor_loss_grads, critic_loss_grads, Agent, Replay, SacConfig, UpdateReport};
pub use checkpoint::{config_hash, Checkpoint, CheckpointError};
pub use train::{curve_tail, CurveTail, EpisodeSummary, PretrainConfig, TrainConfig, TrainError, Trainer};
