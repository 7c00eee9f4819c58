//! Three-degree-of-freedom vehicle body on four Magic Formula tires.
//!
//! The body state is the 6-vector `[X, Y, phi, vx, vy, r]` in a global frame
//! with `Y` to the left and yaw positive counter-clockwise. Each wheel carries
//! a spin speed integrated from the rear-axle torque and the tire reaction.
//! Vertical loads are the static axle split.

mod params;
mod tire;

pub use params::{ParamFile, VehicleParams, GRAVITY};
pub use tire::{contact_speed, slip_quantities, slip_ratio, tire_forces, wheel_position, Slip, TireParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("integration diverged: {0}")]
    Diverged(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// Global position (m).
    pub x: f64,
    pub y: f64,
    /// Yaw angle (rad).
    pub phi: f64,
    /// Body-frame velocities (m/s) and yaw rate (rad/s).
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, phi: f64, vx: f64, vy: f64, r: f64) -> Self {
        Self { x, y, phi, vx, vy, r }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.phi, self.vx, self.vy, self.r]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Front-wheel steering angle (rad).
    pub delta_f: f64,
    /// Rear-axle drive (+) / brake (-) torque (N·m).
    pub torque_rear: f64,
}

impl ControlInput {
    pub fn new(delta_f: f64, torque_rear: f64) -> Self {
        Self { delta_f, torque_rear }
    }

    pub fn clamped(&self, p: &VehicleParams) -> Self {
        Self {
            delta_f: self.delta_f.clamp(-p.delta_max, p.delta_max),
            torque_rear: self.torque_rear.clamp(-p.torque_max, p.torque_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WheelId {
    FrontLeft,
    FrontRight,
    RearLeft,
    RearRight,
}

impl WheelId {
    pub const ALL: [WheelId; 4] = [WheelId::FrontLeft, WheelId::FrontRight, WheelId::RearLeft, WheelId::RearRight];

    pub fn is_front(self) -> bool {
        matches!(self, WheelId::FrontLeft | WheelId::FrontRight)
    }
}

/// Spin speeds (rad/s) in `WheelId::ALL` order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub omega: [f64; 4],
}

impl WheelSpeeds {
    /// Free rolling at the body's current contact speeds.
    pub fn rolling(x: &VehicleState, delta_f: f64, p: &VehicleParams) -> Self {
        let mut omega = [0.0; 4];
        for (o, id) in omega.iter_mut().zip(WheelId::ALL) {
            *o = (contact_speed(x, id, delta_f, p) / p.wheel_radius).max(0.0);
        }
        Self { omega }
    }
}

/// Per-wheel diagnostic snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WheelState {
    pub omega: f64,
    pub sx: f64,
    pub slip_angle: f64,
    pub fz: f64,
    /// Forces the road applies to the wheel, in the wheel frame.
    pub fx: f64,
    pub fy: f64,
}

/// Sum wheel-frame forces into body-frame totals and the yaw moment.
///
/// Front forces are rotated by the steering angle; the moment takes each
/// force about the centroid with the wheel's mounting position as lever arm.
pub fn aggregate_forces(forces: &[(f64, f64); 4], p: &VehicleParams, delta_f: f64) -> (f64, f64, f64) {
    let (s, c) = delta_f.sin_cos();
    let mut fx_total = 0.0;
    let mut fy_total = 0.0;
    let mut mz = 0.0;
    for (id, &(fx_w, fy_w)) in WheelId::ALL.iter().zip(forces) {
        let (fx, fy) = if id.is_front() { (fx_w * c - fy_w * s, fx_w * s + fy_w * c) } else { (fx_w, fy_w) };
        let (px, py) = wheel_position(*id, p);
        fx_total += fx;
        fy_total += fy;
        mz += px * fy - py * fx;
    }
    (fx_total, fy_total, mz)
}

/// Implicit Euler update of one wheel's spin: `Iw (w' - w) / h = T - R Fx(sx(w'))`.
///
/// Solved by safeguarded Newton on the bracket implied by `|Fx| <= mu Fz`.
/// Brake torque only opposes rotation, so the result is clamped at zero.
fn integrate_wheel(omega: f64, torque: f64, v_contact: f64, fz: f64, h: f64, p: &VehicleParams, tp: &TireParams) -> f64 {
    let iw = p.wheel_inertia;
    let rr = p.wheel_radius;
    let denom = v_contact.abs().max(p.low_speed_floor);
    let residual = |w: f64| -> (f64, f64) {
        let raw = (w * rr - v_contact) / denom;
        let sx = raw.clamp(-1.0, 1.0);
        let (fx, dfx) = tire::mf_x_with_slope(sx, tp, fz);
        let dsx = if raw.abs() < 1.0 { rr / denom } else { 0.0 };
        (iw * (w - omega) - h * (torque - rr * fx), iw + h * rr * dfx * dsx)
    };
    let span = h * rr * tp.mu_x * fz / iw;
    let mut lo = omega + h * torque / iw - span;
    let mut hi = omega + h * torque / iw + span;
    let mut w = omega + h * torque / iw;
    for _ in 0..60 {
        let (f, df) = residual(w);
        if f.abs() < 1e-12 {
            break;
        }
        if f > 0.0 {
            hi = w;
        } else {
            lo = w;
        }
        let newton = w - f / df;
        w = if df > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-12 {
            break;
        }
    }
    w.max(0.0)
}

/// Full transition result including per-wheel diagnostics of the final substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: VehicleState,
    pub wheels: WheelSpeeds,
    pub wheel_states: [WheelState; 4],
    pub substeps: usize,
}

/// Number of explicit substeps needed to keep the lateral and yaw modes
/// stable. At normal speeds this is one, i.e. a single Euler step of `dt`.
fn substeps_for(x: &VehicleState, p: &VehicleParams, tp: &TireParams) -> usize {
    let (fz_f, fz_r) = p.static_loads();
    let cf = 2.0 * tp.cornering_stiffness(fz_f);
    let cr = 2.0 * tp.cornering_stiffness(fz_r);
    let v = x.vx.max(p.low_speed_floor);
    let lat = (cf + cr) / (p.m * v);
    let yaw = (cf * p.la * p.la + cr * p.lb * p.lb) / (p.iz * v);
    (p.dt * lat.max(yaw)).ceil().max(1.0) as usize
}

pub fn step_detailed(
    x: &VehicleState,
    wheels: &WheelSpeeds,
    u: &ControlInput,
    p: &VehicleParams,
    tp: &TireParams,
) -> Result<StepOutcome, DynamicsError> {
    if !x.is_finite() || !u.delta_f.is_finite() || !u.torque_rear.is_finite() {
        return Err(DynamicsError::Domain(format!("non-finite state or input: {x:?} {u:?}")));
    }
    let u = u.clamped(p);
    let (fz_f, fz_r) = p.static_loads();
    let n = substeps_for(x, p, tp);
    let h = p.dt / n as f64;

    let mut s = *x;
    let mut w = *wheels;
    let mut diag = [WheelState::default(); 4];
    for _ in 0..n {
        let mut forces = [(0.0, 0.0); 4];
        for (i, id) in WheelId::ALL.into_iter().enumerate() {
            let fz = if id.is_front() { fz_f } else { fz_r };
            let torque = if id.is_front() { 0.0 } else { 0.5 * u.torque_rear };
            let v_contact = contact_speed(&s, id, u.delta_f, p);
            w.omega[i] = integrate_wheel(w.omega[i], torque, v_contact, fz, h, p, tp);
            let slip = slip_quantities(&s, id, u.delta_f, w.omega[i], p);
            let (fx_mf, fy_mf) = tire_forces(slip, tp, fz)?;
            let (mut fx, mut fy) = (fx_mf, -fy_mf);
            // Combined slip: keep the force pair inside the friction ellipse.
            let usage = (fx / (tp.mu_x * fz)).hypot(fy / (tp.mu_y * fz));
            if usage > 1.0 {
                fx /= usage;
                fy /= usage;
            }
            forces[i] = (fx, fy);
            diag[i] = WheelState { omega: w.omega[i], sx: slip.sx, slip_angle: slip.slip_angle, fz, fx, fy };
        }
        let (fx, fy, mz) = aggregate_forces(&forces, p, u.delta_f);
        let (sin_phi, cos_phi) = s.phi.sin_cos();
        let dx = s.vx * cos_phi - s.vy * sin_phi;
        let dy = s.vx * sin_phi + s.vy * cos_phi;
        let dvx = fx / p.m + s.r * s.vy;
        let dvy = -s.r * s.vx + fy / p.m;
        let dr = mz / p.iz;
        s = VehicleState {
            x: s.x + h * dx,
            y: s.y + h * dy,
            phi: s.phi + h * s.r,
            vx: (s.vx + h * dvx).max(0.0),
            vy: s.vy + h * dvy,
            r: s.r + h * dr,
        };
    }

    if !s.is_finite() || s.vx.abs() > p.max_speed || s.vy.abs() > p.max_speed || s.r.abs() > p.max_yaw_rate {
        return Err(DynamicsError::Diverged(format!("state left physical bounds: {s:?}")));
    }
    Ok(StepOutcome { state: s, wheels: w, wheel_states: diag, substeps: n })
}

/// One control period of the body dynamics.
pub fn step(
    x: &VehicleState,
    wheels: &WheelSpeeds,
    u: &ControlInput,
    p: &VehicleParams,
    tp: &TireParams,
) -> Result<(VehicleState, WheelSpeeds), DynamicsError> {
    step_detailed(x, wheels, u, p, tp).map(|o| (o.state, o.wheels))
}

/// Owned simulator instance: body state, wheel spin and parameters.
#[derive(Debug, Clone)]
pub struct Vehicle {
    pub state: VehicleState,
    pub wheels: WheelSpeeds,
    pub params: VehicleParams,
    pub tires: TireParams,
}

impl Vehicle {
    pub fn new(state: VehicleState, params: VehicleParams, tires: TireParams) -> Self {
        let wheels = WheelSpeeds::rolling(&state, 0.0, &params);
        Self { state, wheels, params, tires }
    }

    pub fn advance(&mut self, u: &ControlInput) -> Result<VehicleState, DynamicsError> {
        let (s, w) = step(&self.state, &self.wheels, u, &self.params, &self.tires)?;
        self.state = s;
        self.wheels = w;
        Ok(s)
    }
}
