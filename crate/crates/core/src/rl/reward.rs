//! Shaped step reward and terminal reward.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    pub k_sf1: f64,
    pub k_sf2: f64,
    pub d_0: f64,
    pub k_co: f64,
    pub k_sm: f64,
    pub k_hc: f64,
    pub k_od: f64,
    /// Reference longitudinal position; `None` uses the scenario's
    /// obstacle-free progress at `v_ori`.
    pub x_r: Option<f64>,
    /// Weight of the potential-field penalty used by the second ablation.
    pub k_pf: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self { k_sf1: -1.0, k_sf2: 0.0, d_0: 5.0, k_co: 0.5, k_sm: 0.1, k_hc: 100.0, k_od: 0.1, x_r: None, k_pf: 1.0 }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_sf1 < 0.0 && self.d_0 > 0.0 && self.k_co > 0.0 && self.k_sm > 0.0 && self.k_hc > 0.0 && self.k_od > 0.0 {
            Ok(())
        } else {
            Err(format!("reward parameters out of range: {self:?}"))
        }
    }
}

/// The three per-step terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub safety: f64,
    pub collaboration: f64,
    pub smoothness: f64,
}

impl StepReward {
    pub fn total(&self) -> f64 {
        self.safety + self.collaboration + self.smoothness
    }
}

pub fn safety_reward(v_h: f64, p: &RewardParams) -> f64 {
    p.k_sf1 * ((v_h - p.k_sf2) / p.d_0).exp()
}

pub fn step_reward(v_h: f64, u_m: f64, u_d: f64, u_m_prev: f64, gamma_auth: f64, p: &RewardParams) -> StepReward {
    StepReward {
        safety: safety_reward(v_h, p),
        collaboration: -p.k_co * gamma_auth * (u_m - u_d).powi(2),
        smoothness: -p.k_sm * (u_m - u_m_prev).powi(2),
    }
}

/// Hard-constraint penalty on a positive final value, progress otherwise.
pub fn terminal_reward(v_h_final: f64, x_final: f64, x_r: f64, p: &RewardParams) -> f64 {
    if v_h_final > 0.0 {
        -p.k_hc
    } else {
        p.k_od * (x_final - x_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn step_examples() {
        let p = RewardParams::default();
        assert_eq!(step_reward(-3.0, 0.1, 0.1, 0.0, 0.7, &p).collaboration, 0.0);
        assert_eq!(step_reward(-3.0, 0.1, 0.0, 0.1, 0.7, &p).smoothness, 0.0);
        assert_relative_eq!(safety_reward(-10.0, &p), -(-2.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(safety_reward(-10.0, &p), -0.1353, epsilon = 1e-4);
    }

    #[test]
    fn terminal_examples() {
        let p = RewardParams::default();
        assert_eq!(terminal_reward(0.2, 80.0, 75.0, &p), -100.0);
        assert_eq!(terminal_reward(-5.0, 75.0, 75.0, &p), 0.0);
        assert_relative_eq!(terminal_reward(-5.0, 87.0, 75.0, &p), 1.2, epsilon = 1e-12);
    }
}
