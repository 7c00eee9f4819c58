//! Preview driver: tangent-point avoidance, path recovery, cognitive delay,
//! neuromuscular filter and speed tracking.
//!
//! Values of `v_h` passed here are in the driver's calibrated units (see
//! `ScenarioConfig::value_scale`).

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Obstacle;
use crate::vehicle::{ControlInput, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverParams {
    /// Cognitive delay (s).
    pub t_m: f64,
    /// Neuromuscular zero and pole time constants (s).
    pub t_n1: f64,
    pub t_n2: f64,
    pub k_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Floor on `|v_h|` in the envelope scaling.
    pub v_floor: f64,
    /// Preview-angle noise standard deviation (rad).
    pub sigma: f64,
    /// Recovery preview distance (m).
    pub l_s: f64,
    pub alpha_vd: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Visual angle to road-wheel angle ratio.
    pub steering_gain: f64,
    /// `v_h` above which the driver targets a standstill.
    pub brake_threshold: f64,
    /// Largest brake torque the driver applies (N·m), below rear lock-up.
    pub max_brake_torque: f64,
    pub phase_hysteresis: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        Self {
            t_m: 0.3,
            t_n1: 0.1,
            t_n2: 0.2,
            k_lambda: 20.0,
            lambda_min: 1.05,
            lambda_max: 3.0,
            v_floor: 0.5,
            sigma: 0.01,
            l_s: 15.0,
            alpha_vd: 1.0,
            kp: 600.0,
            ki: 40.0,
            kd: 0.0,
            steering_gain: 0.25,
            brake_threshold: -3.0,
            max_brake_torque: 1800.0,
            phase_hysteresis: 0.5,
        }
    }
}

impl DriverParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_m >= 0.0 && self.t_n2 > 0.0 && self.t_n1 >= 0.0 && self.l_s > 0.0 && self.sigma >= 0.0) {
            return Err(format!("driver parameters out of range: {self:?}"));
        }
        if !(self.lambda_min >= 1.0 && self.lambda_max >= self.lambda_min) {
            return Err("envelope scale bounds must satisfy 1 <= min <= max".into());
        }
        Ok(())
    }

    /// Named presets for the three driver states.
    pub fn preset(name: &str) -> Option<(Self, f64)> {
        let base = Self::default();
        match name {
            "normal" => Some((base, 0.8)),
            "low-attention" => Some((Self { t_m: 0.5, sigma: 0.02, t_n2: 0.25, ..base }, 0.5)),
            "distracted" => Some((Self { t_m: 0.75, sigma: 0.03, t_n2: 0.3, ..base }, 0.3)),
            _ => None,
        }
    }
}

/// Envelope scale `k_λ CAI / |v_h|`, clamped.
pub fn scale_factor(cai: f64, v_h: f64, p: &DriverParams) -> f64 {
    scale_factor_raw(cai, v_h, p).clamp(p.lambda_min, p.lambda_max)
}

pub fn scale_factor_raw(cai: f64, v_h: f64, p: &DriverParams) -> f64 {
    p.k_lambda * cai / v_h.abs().max(p.v_floor)
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Both tangent points from `(x, y)` to the axis-aligned ellipse centred at
/// `(x0, y0)` with semi-axes `(sa, sb)`. `None` when the point is not outside.
pub fn tangent_points(x: f64, y: f64, x0: f64, y0: f64, sa: f64, sb: f64) -> Option<[(f64, f64); 2]> {
    // The affine map to the unit circle preserves tangency.
    let px = (x - x0) / sa;
    let py = (y - y0) / sb;
    let rho = px.hypot(py);
    if rho <= 1.0 {
        return None;
    }
    let beta = py.atan2(px);
    let alpha = (1.0 / rho).acos();
    Some([beta + alpha, beta - alpha].map(|t| (x0 + sa * t.cos(), y0 + sb * t.sin())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preview {
    pub theta: f64,
    /// The vehicle was inside the (capped) envelope; the outward normal was used.
    pub inside: bool,
    pub lambda: f64,
}

/// Avoidance preview angle toward the tangent point needing the smaller turn.
///
/// The envelope is shrunk if needed so the vehicle stays outside it; when even
/// the minimum envelope contains the vehicle the outward normal is used.
pub fn avoidance_preview(x: &VehicleState, obs: &Obstacle, lambda: f64, min_lambda: f64, noise: f64) -> Preview {
    let (x0, y0, a, b) = obs.envelope();
    let rho = ((x.x - x0) / a).hypot((x.y - y0) / b);
    let lam = lambda.min(0.95 * rho);
    if lam < min_lambda {
        let nx = (x.x - x0) / (a * a);
        let ny = (x.y - y0) / (b * b);
        let theta = wrap_angle(ny.atan2(nx) - x.phi) + noise;
        return Preview { theta, inside: true, lambda: lam.max(min_lambda) };
    }
    let pts = tangent_points(x.x, x.y, x0, y0, lam * a, lam * b).expect("vehicle outside the capped envelope");
    let th = pts.map(|(tx, ty)| wrap_angle((ty - x.y).atan2(tx - x.x) - x.phi));
    let theta = if (th[0].abs() - th[1].abs()).abs() <= 1e-12 {
        th[0].max(th[1])
    } else if th[0].abs() < th[1].abs() {
        th[0]
    } else {
        th[1]
    };
    Preview { theta: theta + noise, inside: false, lambda: lam }
}

/// Straight reference path through `(x, y)` with heading `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLine {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl PathLine {
    /// Signed lateral offset from the vehicle to the path (positive when the
    /// path lies to the vehicle's left) and heading error.
    pub fn errors(&self, s: &VehicleState) -> (f64, f64) {
        let (sn, cs) = self.phi.sin_cos();
        let lateral = -sn * (s.x - self.x) + cs * (s.y - self.y);
        (-lateral, wrap_angle(self.phi - s.phi))
    }

    /// Distance travelled along the path direction.
    pub fn along(&self, x: f64, y: f64) -> f64 {
        let (sn, cs) = self.phi.sin_cos();
        cs * (x - self.x) + sn * (y - self.y)
    }
}

/// `atan(ΔY / l_s) + e_φ`.
pub fn recovery_preview(delta_y: f64, e_phi: f64, l_s: f64) -> f64 {
    (delta_y / l_s).atan() + e_phi
}

/// Timestamped history of both preview angles.
#[derive(Debug, Clone, Default)]
pub struct DelayLine {
    buf: VecDeque<(f64, f64, f64)>,
}

impl DelayLine {
    pub fn push(&mut self, t: f64, theta_c: f64, theta_f: f64) {
        self.buf.push_back((t, theta_c, theta_f));
    }

    /// Angles at `t - t_m`, linearly interpolated; before the buffer starts the
    /// oldest sample is returned. Samples no longer needed are dropped.
    pub fn delayed(&mut self, t: f64, t_m: f64) -> (f64, f64) {
        let tq = t - t_m;
        while self.buf.len() >= 2 && self.buf[1].0 <= tq {
            self.buf.pop_front();
        }
        let (t0, c0, f0) = *self.buf.front().expect("delay line is empty");
        if tq <= t0 || self.buf.len() == 1 {
            return (c0, f0);
        }
        let (t1, c1, f1) = self.buf[1];
        let w = (tq - t0) / (t1 - t0);
        (c0 + w * (c1 - c0), f0 + w * (f1 - f0))
    }
}

/// Discrete realisation of `(T1 s + 1) / (T2 s + 1)`, written as the
/// feed-through `T1/T2` plus a first-order lag discretised by zero-order hold.
/// The jump on a step is exactly `T1/T2` and the DC gain exactly one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neuromuscular {
    ratio: f64,
    pole: f64,
    state: f64,
}

impl Neuromuscular {
    pub fn new(t_n1: f64, t_n2: f64, dt: f64) -> Self {
        Self { ratio: t_n1 / t_n2, pole: (-dt / t_n2).exp(), state: 0.0 }
    }

    pub fn pole(&self) -> f64 {
        self.pole
    }

    pub fn reset(&mut self, value: f64) {
        self.state = value;
    }

    pub fn step(&mut self, u: f64) -> f64 {
        let y = self.ratio * u + (1.0 - self.ratio) * self.state;
        self.state = self.pole * self.state + (1.0 - self.pole) * u;
        y
    }
}

/// Target speed: proportional to insight while the state is comfortably
/// safe, zero (emergency braking) above the threshold.
pub fn target_speed(v_h: f64, cai: f64, v_ori: f64, p: &DriverParams) -> f64 {
    if v_h <= p.brake_threshold {
        p.alpha_vd * v_ori * cai
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Pid {
    pub integral: f64,
    pub prev_err: Option<f64>,
}

impl Pid {
    pub fn update(&mut self, err: f64, dt: f64, p: &DriverParams, lo: f64, hi: f64) -> f64 {
        let deriv = self.prev_err.map_or(0.0, |e| (err - e) / dt);
        self.prev_err = Some(err);
        let unclamped = p.kp * err + p.ki * (self.integral + err * dt) + p.kd * deriv;
        // Conditional integration as anti-windup.
        if unclamped > lo && unclamped < hi {
            self.integral += err * dt;
        }
        (p.kp * err + p.ki * self.integral + p.kd * deriv).clamp(lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Obstacle not yet detected: follow the original path at `v_ori`.
    Cruise,
    Avoidance,
    Recovery,
}

/// Everything the driver computed in one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverOutput {
    pub control: ControlInput,
    pub phase: Phase,
    pub lambda: f64,
    pub theta_c: f64,
    pub theta_f: f64,
    pub theta_p: f64,
    pub v_td: f64,
    pub braking: bool,
    pub inside_envelope: bool,
}

#[derive(Debug, Clone)]
pub struct DriverModel {
    pub params: DriverParams,
    pub path: PathLine,
    pub v_ori: f64,
    pub delta_max: f64,
    pub torque_max: f64,
    pub dt: f64,
    phase: Phase,
    delay: DelayLine,
    filter: Neuromuscular,
    pid: Pid,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    braking_seen: bool,
    phase_switches: usize,
}

impl DriverModel {
    pub fn new(params: DriverParams, path: PathLine, v_ori: f64, delta_max: f64, torque_max: f64, dt: f64, seed: u64) -> Self {
        Self {
            filter: Neuromuscular::new(params.t_n1, params.t_n2, dt),
            noise: Normal::new(0.0, params.sigma).expect("sigma is non-negative"),
            params,
            path,
            v_ori,
            delta_max,
            torque_max,
            dt,
            phase: Phase::Cruise,
            delay: DelayLine::default(),
            pid: Pid::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            braking_seen: false,
            phase_switches: 0,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn braking_seen(&self) -> bool {
        self.braking_seen
    }

    pub fn phase_switches(&self) -> usize {
        self.phase_switches
    }

    /// One control step at time `t`. `v_h` is ignored before detection.
    pub fn act(&mut self, x: &VehicleState, obs: &Obstacle, v_h: f64, cai: f64, detected: bool, t: f64) -> DriverOutput {
        let p = self.params;
        let (dy, e_phi) = self.path.errors(x);
        let theta_f = recovery_preview(dy, e_phi, p.l_s);

        if detected && self.phase == Phase::Cruise {
            self.phase = Phase::Avoidance;
        }
        let mut lambda = p.lambda_min;
        let mut inside = false;
        let theta_c = if self.phase == Phase::Cruise {
            theta_f
        } else {
            lambda = scale_factor(cai, v_h, &p);
            let noise = if p.sigma > 0.0 { self.noise.sample(&mut self.rng) } else { 0.0 };
            let pv = avoidance_preview(x, obs, lambda, p.lambda_min, noise);
            lambda = pv.lambda;
            inside = pv.inside;
            pv.theta
        };
        if self.phase == Phase::Avoidance {
            let (x0, y0, a, _) = obs.envelope();
            let past = self.path.along(x.x, x.y) - self.path.along(x0, y0);
            if past > lambda * a + p.phase_hysteresis {
                self.phase = Phase::Recovery;
                self.phase_switches += 1;
            }
        }

        self.delay.push(t, theta_c, theta_f);
        let (dc, df) = self.delay.delayed(t, p.t_m);
        let theta_p = if self.phase == Phase::Avoidance { dc } else { df };
        let delta = (p.steering_gain * self.filter.step(theta_p)).clamp(-self.delta_max, self.delta_max);

        let v_td = if self.phase == Phase::Cruise { self.v_ori } else { target_speed(v_h, cai, self.v_ori, &p) };
        let braking = self.phase != Phase::Cruise && v_h > p.brake_threshold;
        self.braking_seen |= braking;
        let torque = self.pid.update(v_td - x.vx, self.dt, &p, -p.max_brake_torque.min(self.torque_max), self.torque_max);

        DriverOutput {
            control: ControlInput::new(delta, torque),
            phase: self.phase,
            lambda,
            theta_c,
            theta_f,
            theta_p,
            v_td,
            braking,
            inside_envelope: inside,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn scale_factor_examples() {
        let p = DriverParams::default();
        assert_eq!(scale_factor(0.0, -5.0, &p), 1.05);
        assert_relative_eq!(scale_factor_raw(0.8, -8.0, &p), 2.0, epsilon = 1e-12);
        assert_relative_eq!(scale_factor_raw(0.5, -3.0, &p), 2.0 * scale_factor_raw(0.5, -6.0, &p), epsilon = 1e-12);
    }

    #[test]
    fn circle_tangent_half_angle() {
        let obs = Obstacle::Circle { x0: 20.0, y0: 0.0, radius: 4.0 };
        let x = VehicleState { x: 0.0, ..Default::default() };
        let lam = 1.5;
        let pv = avoidance_preview(&x, &obs, lam, 1.05, 0.0);
        assert!(pv.theta > 0.0, "tie goes left");
        assert_relative_eq!(pv.theta, (lam * 4.0 / 20.0f64).asin(), epsilon = 1e-9);
    }

    #[test]
    fn preview_picks_smaller_turn() {
        let obs = Obstacle::canonical_ellipse();
        let x = VehicleState { x: 0.0, y: -1.0, ..Default::default() };
        let pv = avoidance_preview(&x, &obs, 1.3, 1.05, 0.0);
        assert!(pv.theta < 0.0);
        let again = avoidance_preview(&x, &obs, 1.3, 1.05, 0.0);
        assert_eq!(pv, again);
    }

    #[test]
    fn envelope_is_capped_and_falls_back_inside() {
        let obs = Obstacle::canonical_ellipse();
        let x = VehicleState { x: 12.0, y: 3.0, ..Default::default() };
        let pv = avoidance_preview(&x, &obs, 3.0, 1.05, 0.0);
        assert!(!pv.inside && pv.lambda < 3.0);
        let x = VehicleState { x: 23.0, y: 5.1, ..Default::default() };
        let pv = avoidance_preview(&x, &obs, 3.0, 1.05, 0.0);
        assert!(pv.inside);
        assert_relative_eq!(pv.theta, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery_preview(0.0, 0.0, 15.0), 0.0);
        assert_relative_eq!(recovery_preview(10.0, 0.0, 10.0), PI / 4.0);
        assert_relative_eq!(recovery_preview(2.0, 0.05, 10.0), 0.2474, epsilon = 1e-4);
        let path = PathLine { x: 0.0, y: 0.0, phi: 0.0 };
        let (dy, ephi) = path.errors(&VehicleState { y: -2.0, phi: -0.05, ..Default::default() });
        assert_relative_eq!(dy, 2.0, epsilon = 1e-12);
        assert_relative_eq!(ephi, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn delay_line_behaviour() {
        let mut d = DelayLine::default();
        d.push(0.0, 1.0, 2.0);
        assert_eq!(d.delayed(0.0, 0.0), (1.0, 2.0));
        let mut d = DelayLine::default();
        let c = 0.7;
        for k in 0..200 {
            let t = k as f64 * 0.01;
            d.push(t, c * t, 0.0);
            let (out, _) = d.delayed(t, 0.3);
            let want = if t < 0.3 { 0.0 } else { c * (t - 0.3) };
            assert_relative_eq!(out, want, epsilon = 1e-12);
        }
        // Half-step delays interpolate.
        let mut d = DelayLine::default();
        for k in 0..50 {
            let t = k as f64 * 0.01;
            d.push(t, c * t, 0.0);
            if t >= 0.1 {
                assert_relative_eq!(d.delayed(t, 0.055).0, c * (t - 0.055), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn neuromuscular_step_response() {
        let mut f = Neuromuscular::new(0.1, 0.2, 0.01);
        let first = f.step(2.0);
        assert_relative_eq!(first / 2.0, 0.5, epsilon = 1e-12);
        let mut y = first;
        for _ in 0..5000 {
            y = f.step(2.0);
        }
        assert_relative_eq!(y, 2.0, epsilon = 1e-9);
        let mut g = Neuromuscular::new(0.2, 0.2, 0.01);
        for k in 0..20 {
            let u = (k as f64 * 0.3).sin();
            assert_eq!(g.step(u), u);
        }
    }

    #[test]
    fn target_speed_examples() {
        let p = DriverParams::default();
        assert_eq!(target_speed(-2.5, 0.8, 12.5, &p), 0.0);
        assert_relative_eq!(target_speed(-10.0, 0.8, 12.5, &p), 10.0, epsilon = 1e-12);
        let mut pid = Pid::default();
        assert_eq!(pid.update(0.0, 0.01, &p, -3000.0, 3000.0), 0.0);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let obs = Obstacle::canonical_ellipse();
        let x = VehicleState::default();
        let sigma = 0.02;
        let base = avoidance_preview(&x, &obs, 1.5, 1.05, 0.0).theta;
        let p = DriverParams { sigma, ..Default::default() };
        let mut m = DriverModel::new(p, PathLine { x: 0.0, y: 0.0, phi: 0.0 }, 12.5, 0.5, 3000.0, 0.01, 11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let e = m.noise.sample(&mut m.rng);
            let th = avoidance_preview(&x, &obs, 1.5, 1.05, e).theta - base;
            sum += th;
            sq += th * th;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "var ratio {}", var / (sigma * sigma));
    }

    proptest! {
        #[test]
        fn filter_pole_inside_unit_circle(dt in 0.001..0.02f64, t2 in 0.05..2.0f64, t1 in 0.0..2.0f64) {
            let f = Neuromuscular::new(t1, t2, dt);
            prop_assert!(f.pole().abs() < 1.0);
        }

        #[test]
        fn tangent_points_lie_on_ellipse(x in -30.0..0.0f64, y in -20.0..20.0f64, a in 2.0..10.0f64, b in 1.0..2.0f64) {
            if let Some(pts) = tangent_points(x, y, 5.0, 1.0, a, a * b / 2.0) {
                for (tx, ty) in pts {
                    let e = ((tx - 5.0) / a).powi(2) + ((ty - 1.0) / (a * b / 2.0)).powi(2);
                    prop_assert!((e - 1.0).abs() < 1e-9);
                    // Tangency: the sight line is orthogonal to the normal.
                    let nx = (tx - 5.0) / (a * a);
                    let ny = (ty - 1.0) / (a * b / 2.0).powi(2);
                    let dot = nx * (tx - x) + ny * (ty - y);
                    prop_assert!(dot.abs() < 1e-8 * (1.0 + (tx - x).hypot(ty - y)));
                }
            }
        }
    }
}
