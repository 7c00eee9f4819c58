//! Kinematic single-track model over `(X, Y, phi, v)` with a fixed action set.

use serde::{Deserialize, Serialize};

/// Reduced state `[X, Y, phi, v]`.
pub type Reduced = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedAction {
    /// Fraction of the speed-dependent steering limit, in `[-1, 1]`.
    pub steer_frac: f64,
    /// Longitudinal acceleration (m/s²).
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReducedDynamics {
    pub dt: f64,
    pub wheelbase: f64,
    pub delta_max: f64,
    /// Lateral acceleration the tires can sustain; caps steering at speed.
    pub a_lat: f64,
    pub v_max: f64,
    pub n_steer: usize,
    pub accels: Vec<f64>,
}

impl Default for ReducedDynamics {
    fn default() -> Self {
        Self { dt: 0.1, wheelbase: 2.7, delta_max: 0.5, a_lat: 6.5, v_max: 15.0, n_steer: 9, accels: vec![-3.5, 0.0, 1.5] }
    }
}

impl ReducedDynamics {
    pub fn actions(&self) -> Vec<ReducedAction> {
        let mut out = Vec::with_capacity(self.n_steer * self.accels.len());
        for i in 0..self.n_steer {
            let steer_frac = if self.n_steer == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (self.n_steer - 1) as f64 };
            for &accel in &self.accels {
                out.push(ReducedAction { steer_frac, accel });
            }
        }
        out
    }

    /// Steering limit at speed `v`: the mechanical bound or the angle that
    /// produces `a_lat` on the kinematic bicycle, whichever is smaller.
    pub fn steer_limit(&self, v: f64) -> f64 {
        if v <= 1e-9 {
            return self.delta_max;
        }
        self.delta_max.min((self.wheelbase * self.a_lat / (v * v)).atan())
    }

    /// Displacement `(dX, dY, dphi, v')` over one step from heading `phi` at
    /// speed `v`; independent of position.
    pub fn increment(&self, phi: f64, v: f64, a: ReducedAction) -> (f64, f64, f64, f64) {
        let v_next = (v + a.accel * self.dt).clamp(0.0, self.v_max);
        let v_mean = 0.5 * (v + v_next);
        let delta = a.steer_frac * self.steer_limit(v);
        let dphi = v_mean * delta.tan() / self.wheelbase * self.dt;
        let heading = phi + 0.5 * dphi;
        (v_mean * heading.cos() * self.dt, v_mean * heading.sin() * self.dt, dphi, v_next)
    }

    pub fn step(&self, s: &Reduced, a: ReducedAction) -> Reduced {
        let (dx, dy, dphi, v) = self.increment(s[2], s[3], a);
        [s[0] + dx, s[1] + dy, s[2] + dphi, v]
    }

    /// Nearest steering angle (rad) of an action at speed `v`.
    pub fn steering_angle(&self, a: ReducedAction, v: f64) -> f64 {
        a.steer_frac * self.steer_limit(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn action_set_is_nine_by_three() {
        let d = ReducedDynamics::default();
        let acts = d.actions();
        assert_eq!(acts.len(), 27);
        assert_eq!(acts[0].steer_frac, -1.0);
        assert_eq!(acts[26].steer_frac, 1.0);
    }

    #[test]
    fn straight_coast() {
        let d = ReducedDynamics::default();
        let s = d.step(&[1.0, 2.0, 0.0, 10.0], ReducedAction { steer_frac: 0.0, accel: 0.0 });
        assert_relative_eq!(s[0], 2.0, epsilon = 1e-12);
        assert_eq!(s[1], 2.0);
    }

    #[test]
    fn full_lock_turn_respects_lateral_limit() {
        let d = ReducedDynamics::default();
        let v = 12.5;
        let delta = d.steer_limit(v);
        let ay = v * v * delta.tan() / d.wheelbase;
        assert_relative_eq!(ay, d.a_lat, max_relative = 1e-12);
        assert_eq!(d.steer_limit(1.0), d.delta_max);
    }

    #[test]
    fn speed_clamps_at_zero() {
        let d = ReducedDynamics::default();
        let s = d.step(&[0.0, 0.0, 0.0, 0.2], ReducedAction { steer_frac: 0.0, accel: -3.5 });
        assert_eq!(s[3], 0.0);
        assert!(s[0] > 0.0 && s[0] < 0.02);
    }
}
