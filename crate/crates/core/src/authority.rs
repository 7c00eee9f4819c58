//! Collision-avoidance ability and insight, machine weight, and blending.

use serde::{Deserialize, Serialize};

use crate::vehicle::ControlInput;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthorityParams {
    pub alpha_caa: f64,
    pub c_caa: f64,
    pub k_cai1: f64,
    pub k_cai2: f64,
    pub k_caa1: f64,
    pub k_caa2: f64,
    pub gamma_min: f64,
    /// `v_h` at or above `-v_floor` counts as inside the CARS band.
    pub v_floor: f64,
}

impl Default for AuthorityParams {
    fn default() -> Self {
        Self { alpha_caa: 0.1, c_caa: 20.0, k_cai1: 10.0, k_cai2: 0.5, k_caa1: 10.0, k_caa2: 0.5, gamma_min: 0.05, v_floor: 0.1 }
    }
}

impl AuthorityParams {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.k_cai1 > 0.0
            && self.k_caa1 > 0.0
            && self.gamma_min > 0.0
            && self.gamma_min <= 0.2
            && self.k_cai2 > 0.0
            && self.k_cai2 < 1.0
            && self.k_caa2 > 0.0
            && self.k_caa2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(format!("authority parameters out of range: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuthorityState {
    pub caa: f64,
    pub cai: f64,
    pub s_cai: f64,
    pub s_caa: f64,
    pub gamma_auth: f64,
}

/// `1 / (1 + α (v_h + C))` clamped to `[0, 1]`. The flag reports a
/// near-singular denominator, in which case 1 is returned.
pub fn compute_caa(v_h: f64, p: &AuthorityParams) -> (f64, bool) {
    let den = 1.0 + p.alpha_caa * (v_h + p.c_caa);
    if den.abs() <= 1e-6 {
        return (1.0, true);
    }
    ((1.0 / den).clamp(0.0, 1.0), false)
}

/// Ratio of the driver's action value to the state value.
pub fn compute_cai(q_d: f64, v_h: f64, p: &AuthorityParams) -> f64 {
    if q_d > 0.0 || v_h >= -p.v_floor {
        return 0.0;
    }
    (q_d / v_h).clamp(0.0, 1.0)
}

/// `1 - sigmoid(k1 (x - k2))`, evaluated without cancellation.
fn one_minus_sigmoid(x: f64, k1: f64, k2: f64) -> f64 {
    1.0 / (1.0 + (k1 * (x - k2)).exp())
}

pub fn authority_weight(cai: f64, caa: f64, p: &AuthorityParams) -> AuthorityState {
    let c_cai = one_minus_sigmoid(cai, p.k_cai1, p.k_cai2);
    let c_caa = one_minus_sigmoid(caa, p.k_caa1, p.k_caa2);
    AuthorityState {
        caa,
        cai,
        s_cai: 1.0 - c_cai,
        s_caa: 1.0 - c_caa,
        gamma_auth: (c_cai * c_caa).max(p.gamma_min),
    }
}

/// Convex steering blend; torque comes from the driver.
pub fn blend(delta_m: f64, u_d: &ControlInput, gamma_auth: f64) -> ControlInput {
    ControlInput { delta_f: blend_steer(delta_m, u_d.delta_f, gamma_auth), torque_rear: u_d.torque_rear }
}

#[inline]
pub fn blend_steer(delta_m: f64, delta_d: f64, gamma_auth: f64) -> f64 {
    let v = gamma_auth * delta_m + (1.0 - gamma_auth) * delta_d;
    // Rounding can leave the hull by one ulp.
    v.clamp(delta_m.min(delta_d), delta_m.max(delta_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn caa_examples() {
        let p = AuthorityParams::default();
        assert_relative_eq!(compute_caa(-10.0, &p).0, 0.5, epsilon = 1e-12);
        assert_eq!(compute_caa(-20.0, &p).0, 1.0);
        assert!(compute_caa(-0.01, &p).0 < compute_caa(-5.0, &p).0);
        let (v, flagged) = compute_caa(-30.0, &p);
        assert!(flagged && v == 1.0);
    }

    #[test]
    fn cai_examples() {
        let p = AuthorityParams::default();
        assert_eq!(compute_cai(-6.0, -6.0, &p), 1.0);
        assert_eq!(compute_cai(0.5, -6.0, &p), 0.0);
        assert_eq!(compute_cai(-2.0, -4.0, &p), 0.5);
        assert_eq!(compute_cai(-2.0, -0.05, &p), 0.0);
    }

    #[test]
    fn weight_examples() {
        let p = AuthorityParams::default();
        assert_eq!(authority_weight(1.0, 1.0, &p).gamma_auth, p.gamma_min);
        assert_relative_eq!(authority_weight(0.5, 0.5, &p).gamma_auth, 0.25, epsilon = 1e-15);
        let s = 1.0 / (1.0 + (-5.0f64).exp());
        assert_relative_eq!(authority_weight(0.0, 0.0, &p).gamma_auth, s * s, epsilon = 1e-12);
        assert_relative_eq!(authority_weight(0.0, 0.0, &p).gamma_auth, 0.98666, epsilon = 1e-4);
    }

    #[test]
    fn blend_examples() {
        let ud = ControlInput::new(0.0, 123.0);
        assert_eq!(blend(0.2, &ud, 1.0).delta_f, 0.2);
        assert_eq!(blend(0.3, &ControlInput::new(0.3, 0.0), 0.05).delta_f, 0.3);
        assert_relative_eq!(blend(0.2, &ud, 0.5).delta_f, 0.1);
        assert_eq!(blend(0.2, &ud, 0.5).torque_rear, 123.0);
    }
}
