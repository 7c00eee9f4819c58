//! Magic Formula tire forces and per-wheel slip.

use serde::{Deserialize, Serialize};

use super::{DynamicsError, VehicleParams, VehicleState, WheelId};

/// Shape factors and friction for the longitudinal (`x`) and lateral (`y`)
/// Magic Formula curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TireParams {
    pub bx: f64,
    pub cx: f64,
    pub ex: f64,
    pub mu_x: f64,
    pub by: f64,
    pub cy: f64,
    pub ey: f64,
    pub mu_y: f64,
}

impl Default for TireParams {
    fn default() -> Self {
        Self {
            bx: 12.0,
            cx: 1.65,
            ex: 0.1,
            mu_x: 0.85,
            by: 12.0,
            cy: 1.3,
            ey: -0.2,
            mu_y: 0.85,
        }
    }
}

impl TireParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = (0.5..=1.2).contains(&self.mu_x)
            && (0.5..=1.2).contains(&self.mu_y)
            && self.bx > 0.0
            && self.by > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && [self.ex, self.ey].iter().all(|e| e.is_finite());
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidParams(format!("tire parameters out of range: {self:?}")))
        }
    }

    /// Cornering stiffness `dFy/dα` at zero slip for a given load.
    pub fn cornering_stiffness(&self, fz: f64) -> f64 {
        self.mu_y * fz * self.cy * self.by
    }
}

/// Slip inputs to the tire model for one wheel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Slip {
    /// Longitudinal slip ratio, clamped to [-1, 1].
    pub sx: f64,
    /// Slip angle (rad): direction of the contact-patch velocity relative to
    /// the wheel heading.
    pub slip_angle: f64,
}

#[inline]
fn shaped(s: f64, b: f64, e: f64) -> f64 {
    (1.0 - e) * s + e / b * (b * s).atan()
}

#[inline]
fn mf_x(sx: f64, tp: &TireParams, fz: f64) -> f64 {
    tp.mu_x * fz * (tp.cx * (tp.bx * shaped(sx, tp.bx, tp.ex)).atan()).sin()
}

#[inline]
fn mf_y(alpha: f64, tp: &TireParams, fz: f64) -> f64 {
    tp.mu_y * fz * (tp.cy * (tp.by * shaped(alpha, tp.by, tp.ey)).atan()).sin()
}

/// Magic Formula forces `(Fx, Fy)` for one tire.
///
/// Both curves are odd in their slip argument with slope `mu*Fz*C*B` at the
/// origin; `Fy` is reported along the slip direction, so the force the road
/// exerts on the wheel is `-Fy`.
pub fn tire_forces(slip: Slip, tp: &TireParams, fz: f64) -> Result<(f64, f64), DynamicsError> {
    if !slip.sx.is_finite() || !slip.slip_angle.is_finite() {
        return Err(DynamicsError::Domain(format!(
            "non-finite slip input (sx = {}, slip_angle = {})",
            slip.sx, slip.slip_angle
        )));
    }
    if !(fz > 0.0) {
        return Err(DynamicsError::Domain(format!("vertical load must be positive, got {fz}")));
    }
    Ok((mf_x(slip.sx, tp, fz), mf_y(slip.slip_angle, tp, fz)))
}

/// Body-frame mounting position `(x, y)` of a wheel, `y` positive to the left.
pub fn wheel_position(id: WheelId, p: &VehicleParams) -> (f64, f64) {
    match id {
        WheelId::FrontLeft => (p.la, 0.5 * p.wf),
        WheelId::FrontRight => (p.la, -0.5 * p.wf),
        WheelId::RearLeft => (-p.lb, 0.5 * p.wr),
        WheelId::RearRight => (-p.lb, -0.5 * p.wr),
    }
}

/// Velocity of the wheel centre projected on the wheel heading.
pub fn contact_speed(x: &VehicleState, id: WheelId, delta_f: f64, p: &VehicleParams) -> f64 {
    let (px, py) = wheel_position(id, p);
    let steer = if id.is_front() { delta_f } else { 0.0 };
    let u = x.vx - x.r * py;
    let v = x.vy + x.r * px;
    u * steer.cos() + v * steer.sin()
}

/// Slip ratio for a wheel spinning at `omega` over ground moving at `v_contact`.
#[inline]
pub fn slip_ratio(omega: f64, v_contact: f64, p: &VehicleParams) -> f64 {
    ((omega * p.wheel_radius - v_contact) / v_contact.abs().max(p.low_speed_floor)).clamp(-1.0, 1.0)
}

/// Slip ratio and slip angle for one wheel.
///
/// Slip angles use the axle-level single-track form; the low-speed floor keeps
/// both denominators away from zero.
pub fn slip_quantities(
    x: &VehicleState,
    id: WheelId,
    delta_f: f64,
    omega: f64,
    p: &VehicleParams,
) -> Slip {
    let vx = x.vx.max(p.low_speed_floor);
    let slip_angle = if id.is_front() {
        ((x.vy + p.la * x.r) / vx).atan() - delta_f
    } else {
        ((x.vy - p.lb * x.r) / vx).atan()
    };
    let v_contact = contact_speed(x, id, delta_f, p);
    Slip { sx: slip_ratio(omega, v_contact, p), slip_angle }
}

/// Longitudinal force and its slope with respect to slip ratio.
pub(crate) fn mf_x_with_slope(sx: f64, tp: &TireParams, fz: f64) -> (f64, f64) {
    let b = tp.bx;
    let e = tp.ex;
    let phi = shaped(sx, b, e);
    let dphi = (1.0 - e) + e / (1.0 + (b * sx).powi(2));
    let inner = tp.cx * (b * phi).atan();
    let f = tp.mu_x * fz * inner.sin();
    let df = tp.mu_x * fz * inner.cos() * tp.cx * b / (1.0 + (b * phi).powi(2)) * dphi;
    (f, df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_slip_gives_zero_force() {
        let (fx, fy) = tire_forces(Slip::default(), &TireParams::default(), 4000.0).unwrap();
        assert_eq!((fx, fy), (0.0, 0.0));
    }

    #[test]
    fn lateral_force_bounded_by_friction() {
        let tp = TireParams { mu_y: 0.9, ..TireParams::default() };
        for i in -200..=200 {
            let alpha = i as f64 * 0.01;
            let (_, fy) = tire_forces(Slip { sx: 0.0, slip_angle: alpha }, &tp, 4000.0).unwrap();
            assert!(fy.abs() <= 3600.0 + 1e-9, "alpha {alpha} fy {fy}");
        }
    }

    #[test]
    fn small_angle_slope_matches_cornering_stiffness() {
        // Central difference of the lateral curve at the origin.
        let tp = TireParams { mu_y: 0.9, ..TireParams::default() };
        let fz = 4000.0;
        let h = 1e-6;
        let (_, fp) = tire_forces(Slip { sx: 0.0, slip_angle: h }, &tp, fz).unwrap();
        let (_, fm) = tire_forces(Slip { sx: 0.0, slip_angle: -h }, &tp, fz).unwrap();
        let slope = (fp - fm) / (2.0 * h);
        assert_relative_eq!(slope, tp.mu_y * fz * tp.cy * tp.by, max_relative = 1e-6);
    }

    #[test]
    fn non_finite_slip_is_rejected() {
        let err = tire_forces(Slip { sx: f64::NAN, slip_angle: 0.0 }, &TireParams::default(), 1.0);
        assert!(matches!(err, Err(DynamicsError::Domain(_))));
    }

    #[test]
    fn slope_helper_matches_finite_difference() {
        let tp = TireParams::default();
        for &s in &[-0.5, -0.05, 0.0, 0.03, 0.2, 0.8] {
            let (_, d) = mf_x_with_slope(s, &tp, 3500.0);
            let h = 1e-7;
            let fd = (mf_x(s + h, &tp, 3500.0) - mf_x(s - h, &tp, 3500.0)) / (2.0 * h);
            assert_relative_eq!(d, fd, max_relative = 1e-5, epsilon = 1e-3);
        }
    }

    #[test]
    fn slip_examples() {
        let p = VehicleParams::default();
        let x = VehicleState { vx: 10.0, ..VehicleState::default() };
        let rolling = 10.0 / p.wheel_radius;
        let s = slip_quantities(&x, WheelId::FrontLeft, 0.0, rolling, &p);
        assert_relative_eq!(s.sx, 0.0, epsilon = 1e-12);
        assert_eq!(s.slip_angle, 0.0);

        let s = slip_quantities(&x, WheelId::FrontRight, 0.1, rolling, &p);
        assert_relative_eq!(s.slip_angle, -0.1, epsilon = 1e-15);

        let s = slip_quantities(&x, WheelId::RearLeft, 0.0, 0.0, &p);
        assert_eq!(s.sx, -1.0);
    }
}
