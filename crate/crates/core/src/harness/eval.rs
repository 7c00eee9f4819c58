//! Closed-loop scenario runs, batch evaluation and robustness sweeps.

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport};
use super::sub_seed;
use crate::env::{run_env, Env, EnvError, EnvOptions, EpisodeLog, Mode};
use crate::par::{map_indices, ExecMode};
use crate::rl::{Agent, Method};
use crate::scenario::ScenarioConfig;
use crate::value::ValueSource;

/// Who steers alongside the driver.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    DriverOnly,
    /// Deterministic action of a trained agent.
    Agent { method: Method, agent: &'a Agent },
    /// Constant machine steering (rad); for plumbing checks.
    Constant { method: Method, delta_m: f64 },
}

impl Policy<'_> {
    pub fn method(&self) -> Method {
        match *self {
            Policy::DriverOnly => Method::Proposed,
            Policy::Agent { method, .. } | Policy::Constant { method, .. } => method,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Policy::DriverOnly => Mode::DriverOnly,
            _ => Mode::Shared,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Policy::DriverOnly => "driver-only".into(),
            p => p.method().name().into(),
        }
    }
}

/// One closed-loop episode; the episode's random draws come from `seed`.
pub fn run_scenario(cfg: &ScenarioConfig, value: &dyn ValueSource, policy: &Policy, seed: u64, timing: bool) -> Result<EpisodeLog, EnvError> {
    let opts = EnvOptions::evaluation(policy.method(), policy.mode());
    let dm = cfg.vehicle.delta_max;
    let mut env = Env::new(cfg, value, opts, seed)?;
    if timing {
        env = env.with_timing();
    }
    let mut act = |o: &[f64; crate::rl::OBS_DIM]| match *policy {
        Policy::DriverOnly => 0.0,
        Policy::Agent { agent, .. } => agent.act_deterministic(o) * dm,
        Policy::Constant { delta_m, .. } => delta_m,
    };
    run_env(&mut env, &mut act)?;
    Ok(env.into_log())
}

/// Evaluate `n` episodes with seeds derived from `seed`. Results are in
/// episode order whatever the execution mode.
pub fn evaluate(
    cfg: &ScenarioConfig,
    value: &dyn ValueSource,
    policy: &Policy,
    seed: u64,
    n: usize,
    mode: ExecMode,
    timing: bool,
) -> Result<Vec<EpisodeLog>, EnvError> {
    map_indices(mode, n, |i| run_scenario(cfg, value, policy, sub_seed(seed, i as u64), timing)).into_iter().collect()
}

/// Convenience wrapper used by callers that only need the summary.
pub fn evaluate_metrics(cfg: &ScenarioConfig, value: &dyn ValueSource, policy: &Policy, seed: u64, n: usize, mode: ExecMode) -> Result<MetricsReport, EnvError> {
    Ok(compute_metrics(&evaluate(cfg, value, policy, seed, n, mode, false)?))
}

/// Coarse shape of the avoidance manoeuvre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Left,
    Right,
    /// Ended at (near) standstill.
    Stop,
    Collision,
}

/// Speed below which an episode counts as stopped (m/s).
const STOP_SPEED: f64 = 1.0;

pub fn classify(log: &EpisodeLog) -> Family {
    if log.collided() {
        return Family::Collision;
    }
    if log.final_state.vx < STOP_SPEED {
        return Family::Stop;
    }
    let y = log.steps.iter().map(|s| s.x.y).fold(0.0, |a: f64, y| if y.abs() > a.abs() { y } else { a });
    if y >= 0.0 {
        Family::Left
    } else {
        Family::Right
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k_lambda: f64,
    pub t_m: f64,
    pub episodes: usize,
    pub success_rate: f64,
    /// Most frequent manoeuvre family; ties go to the earlier variant.
    pub family: Family,
    /// Any episode reached the braking regime.
    pub braking: bool,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub policy: String,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, k_lambda: f64, t_m: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k_lambda == k_lambda && c.t_m == t_m)
    }
}

/// Grid over driver envelope gain and cognitive delay. Every cell reuses the
/// same episode seeds so cells differ only by the swept parameters.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    base: &ScenarioConfig,
    value: &dyn ValueSource,
    policy: &Policy,
    k_lambdas: &[f64],
    t_ms: &[f64],
    episodes: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<SweepReport, EnvError> {
    let grid: Vec<(f64, f64)> = k_lambdas.iter().flat_map(|&k| t_ms.iter().map(move |&t| (k, t))).collect();
    let cells = map_indices(mode, grid.len(), |i| {
        let (k_lambda, t_m) = grid[i];
        let mut cfg = base.clone();
        cfg.driver.k_lambda = k_lambda;
        cfg.driver.t_m = t_m;
        cfg.driver_t_m_range = None;
        let logs = evaluate(&cfg, value, policy, seed, episodes, ExecMode::Sequential, false)?;
        let mut counts = [0usize; 4];
        for l in &logs {
            counts[classify(l) as usize] += 1;
        }
        let best = (0..4).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
        let family = [Family::Left, Family::Right, Family::Stop, Family::Collision][best];
        let metrics = compute_metrics(&logs);
        Ok(SweepCell {
            k_lambda,
            t_m,
            episodes: logs.len(),
            success_rate: metrics.success_rate,
            family,
            braking: metrics.braking_episodes > 0,
            metrics,
        })
    });
    Ok(SweepReport { policy: policy.label(), cells: cells.into_iter().collect::<Result<_, EnvError>>()? })
}
