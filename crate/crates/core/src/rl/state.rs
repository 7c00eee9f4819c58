//! Observation assembly for the agent and its ablations.

use serde::{Deserialize, Serialize};

use crate::driver::wrap_angle;
use crate::geometry::Obstacle;
use crate::vehicle::{ControlInput, VehicleState};

pub const OBS_DIM: usize = 17;

/// Which information the agent sees and how it is rewarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Reachability value in the state and reward, terminal on CARS entry.
    Proposed,
    /// Plain SAC: clearance and bearing instead of the value, terminal on
    /// collision.
    PlainSac,
    /// Potential-field risk in the state and as the safety penalty.
    PotentialField,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Proposed, Method::PlainSac, Method::PotentialField];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::PlainSac => "plain-sac",
            Method::PotentialField => "potential-field",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn terminates_on_cars(self) -> bool {
        self == Method::Proposed
    }
}

/// Inputs of one observation, all from the same control step.
#[derive(Debug, Clone, Copy)]
pub struct ObsInputs<'a> {
    pub x: &'a VehicleState,
    /// Scaled reachability value.
    pub v_h: f64,
    pub caa: f64,
    pub cai: f64,
    pub gamma_auth: f64,
    pub u_d: &'a ControlInput,
    pub u_m_prev: f64,
    pub obstacle: &'a Obstacle,
}

/// Envelope-normalised radius `rho`; 1 on the envelope boundary.
pub fn envelope_radius(x: &VehicleState, obs: &Obstacle) -> f64 {
    let (x0, y0, a, b) = obs.envelope();
    (((x.x - x0) / a).powi(2) + ((x.y - y0) / b).powi(2)).sqrt()
}

/// Approximate distance to the envelope boundary (negative inside).
pub fn clearance(x: &VehicleState, obs: &Obstacle) -> f64 {
    let (_, _, a, b) = obs.envelope();
    (envelope_radius(x, obs) - 1.0) * a.min(b)
}

/// Gaussian potential-field risk in `(0, 1]`, peaking at the centre.
pub fn potential_risk(x: &VehicleState, obs: &Obstacle) -> f64 {
    (-0.5 * envelope_radius(x, obs).powi(2)).exp()
}

/// Angle from heading to the obstacle centre.
pub fn bearing(x: &VehicleState, obs: &Obstacle) -> f64 {
    let (x0, y0) = obs.center();
    wrap_angle((y0 - x.y).atan2(x0 - x.x) - x.phi)
}

pub fn build_obs(method: Method, i: &ObsInputs) -> [f64; OBS_DIM] {
    let (x0, y0, a, b) = i.obstacle.envelope();
    let (risk_slot, ability_slot) = match method {
        Method::Proposed => (i.v_h, i.caa),
        Method::PlainSac => (clearance(i.x, i.obstacle), bearing(i.x, i.obstacle)),
        Method::PotentialField => (potential_risk(i.x, i.obstacle), bearing(i.x, i.obstacle)),
    };
    let s = i.x;
    [
        s.x,
        s.y,
        s.phi,
        s.vx,
        s.vy,
        s.r,
        risk_slot,
        ability_slot,
        i.cai,
        i.gamma_auth,
        i.u_d.delta_f,
        i.u_d.torque_rear,
        i.u_m_prev,
        x0 - s.x,
        y0 - s.y,
        a,
        b,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs<'a>(x: &'a VehicleState, u: &'a ControlInput, o: &'a Obstacle) -> ObsInputs<'a> {
        ObsInputs { x, v_h: -7.0, caa: 0.6, cai: 0.4, gamma_auth: 0.3, u_d: u, u_m_prev: 0.01, obstacle: o }
    }

    #[test]
    fn deterministic_and_finite() {
        let x = VehicleState { x: 3.0, vx: 12.0, ..Default::default() };
        let u = ControlInput::new(0.05, 100.0);
        let o = Obstacle::canonical_ellipse();
        for m in Method::ALL {
            let a = build_obs(m, &inputs(&x, &u, &o));
            assert_eq!(a, build_obs(m, &inputs(&x, &u, &o)));
            assert!(a.iter().all(|v| v.is_finite()));
        }
        assert_eq!(build_obs(Method::Proposed, &inputs(&x, &u, &o))[6], -7.0);
    }

    #[test]
    fn relative_features_translation_invariant() {
        let x = VehicleState { x: 3.0, y: 1.0, vx: 12.0, ..Default::default() };
        let u = ControlInput::default();
        let o = Obstacle::canonical_t_shape();
        let x2 = VehicleState { x: 53.0, ..x };
        let o2 = o.translated(50.0, 0.0);
        for m in Method::ALL {
            let a = build_obs(m, &inputs(&x, &u, &o));
            let b = build_obs(m, &inputs(&x2, &u, &o2));
            for k in 13..OBS_DIM {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
            if m != Method::Proposed {
                assert!((a[6] - b[6]).abs() < 1e-12 && (a[7] - b[7]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_shapes() {
        let o = Obstacle::canonical_ellipse();
        let c = VehicleState { x: 23.0, ..Default::default() };
        assert_eq!(potential_risk(&c, &o), 1.0);
        assert!(clearance(&c, &o) < 0.0);
        let ahead = VehicleState { x: 0.0, y: 1.0, ..Default::default() };
        assert!(bearing(&ahead, &o) < 0.0);
        assert_eq!(Method::parse("plain-sac"), Some(Method::PlainSac));
    }
}
