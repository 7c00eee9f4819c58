//! Episode metrics: success, maximum forward distance and steering conflict.

use serde::{Deserialize, Serialize};

use crate::env::EpisodeLog;

/// Margin above `γ_min` that marks a step as a machine intervention.
pub const INTERVENTION_TOL: f64 = 1e-6;

/// Mean of `|δ_m - δ_d| / (2 δ_max)` over intervention steps, if any.
pub fn episode_nsad(log: &EpisodeLog) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for s in &log.steps {
        if s.gamma_auth > log.gamma_min + INTERVENTION_TOL {
            sum += (s.u_m - s.u_d.delta_f).abs() / (2.0 * log.delta_max);
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64, n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let idx = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        Self { mean_ms: v.iter().sum::<f64>() / v.len() as f64, p95_ms: v[idx], max_ms: v[v.len() - 1], samples: v.len() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub success_rate: f64,
    /// Largest end-of-episode progress `X_final - X_spawn` (m).
    pub mfd: f64,
    /// Mean normalised steering difference over all intervention steps, as a
    /// fraction in `[0, 1]`.
    pub mnsad: f64,
    pub intervention_steps: usize,
    pub braking_episodes: usize,
    pub timing: TimingStats,
}

impl MetricsReport {
    pub fn mnsad_percent(&self) -> f64 {
        100.0 * self.mnsad
    }
}

/// Pure reduction over logs; order-independent up to float summation order,
/// which follows the slice order.
pub fn compute_metrics(logs: &[EpisodeLog]) -> MetricsReport {
    if logs.is_empty() {
        return MetricsReport::default();
    }
    let successes = logs.iter().filter(|l| !l.collided()).count();
    let mfd = logs.iter().map(|l| l.forward_distance()).fold(0.0, f64::max);
    let (mut sum, mut n) = (0.0, 0usize);
    for l in logs {
        if let Some((m, k)) = episode_nsad(l) {
            sum += m * k as f64;
            n += k;
        }
    }
    let times: Vec<f64> = logs.iter().flat_map(|l| l.step_ms.iter().copied()).collect();
    MetricsReport {
        episodes: logs.len(),
        success_rate: successes as f64 / logs.len() as f64,
        mfd,
        mnsad: if n > 0 { sum / n as f64 } else { 0.0 },
        intervention_steps: n,
        braking_episodes: logs.iter().filter(|l| l.braking_seen()).count(),
        timing: TimingStats::from_samples(&times),
    }
}
