//! Uniform access to reachability values from the grid oracle or a fitted
//! approximator.

use std::sync::Arc;

use crate::geometry::SafetyField;
use crate::reach::{ReducedAction, ValueGrid};
use crate::vehicle::{ControlInput, VehicleParams, VehicleState};

pub trait ValueSource: Send + Sync {
    /// `V_h(x)` in the source's native units.
    fn v(&self, x: &VehicleState) -> f64;
    /// `Q_h(x, u)` for the control held over one value step.
    fn q(&self, x: &VehicleState, u: &ControlInput) -> f64;
    /// True when `x` lies outside the region the source was built for.
    fn out_of_domain(&self, x: &VehicleState) -> bool;
}

/// Project a full state onto the reduced `(X, Y, course, speed)` state.
pub fn project(x: &VehicleState) -> [f64; 4] {
    let course = if x.vx.abs() + x.vy.abs() > 1e-9 { x.phi + x.vy.atan2(x.vx) } else { x.phi };
    [x.x, x.y, course, x.speed()]
}

/// Inverse of [`project`] for a state with no sideslip or yaw rate.
pub fn lift(s: &[f64; 4]) -> VehicleState {
    VehicleState { x: s[0], y: s[1], phi: s[2], vx: s[3], vy: 0.0, r: 0.0 }
}

/// Grid oracle viewed through the full vehicle state.
#[derive(Debug, Clone)]
pub struct GridSource {
    pub grid: Arc<ValueGrid>,
    pub vehicle: VehicleParams,
}

impl GridSource {
    pub fn new(grid: Arc<ValueGrid>, vehicle: VehicleParams) -> Self {
        Self { grid, vehicle }
    }

    /// Reduced action closest to a full control input at speed `v`.
    pub fn reduced_action(&self, u: &ControlInput, v: f64) -> ReducedAction {
        let d = &self.grid.dynamics;
        let lim = d.steer_limit(v);
        let lo = d.accels.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.accels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let accel = (u.torque_rear / (self.vehicle.m * self.vehicle.wheel_radius)).clamp(lo, hi);
        ReducedAction { steer_frac: (u.delta_f / lim).clamp(-1.0, 1.0), accel }
    }
}

impl ValueSource for GridSource {
    fn v(&self, x: &VehicleState) -> f64 {
        self.grid.value(&project(x))
    }

    fn q(&self, x: &VehicleState, u: &ControlInput) -> f64 {
        let s = project(x);
        self.grid.q_value(&s, self.reduced_action(u, s[3]))
    }

    fn out_of_domain(&self, x: &VehicleState) -> bool {
        let s = project(x);
        let sp = &self.grid.spec;
        !(sp.x.contains(s[0]) && sp.y.contains(s[1]) && sp.phi.contains(s[2]) && sp.v.contains(s[3]))
    }
}

/// Load a grid oracle or a fitted approximator, recognised by file magic.
pub fn load_value_source(path: &std::path::Path, vehicle: VehicleParams) -> Result<Arc<dyn ValueSource>, crate::reach::ReachError> {
    let mut magic = [0u8; 8];
    std::io::Read::read_exact(&mut std::fs::File::open(path)?, &mut magic)?;
    match &magic {
        b"CARSGRID" => Ok(Arc::new(GridSource::new(Arc::new(ValueGrid::load(path)?), vehicle))),
        b"CARSVAPX" => Ok(Arc::new(crate::reach::ValueApproximator::load(path)?)),
        _ => Err(crate::reach::ReachError::Format(format!("{} is neither a value grid nor a fitted approximator", path.display()))),
    }
}

/// Values on an `nx × ny` grid of cell centres over `(X, Y)` at fixed
/// heading and speed; row-major with `X` fastest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValueSlice {
    pub phi: f64,
    pub v: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl ValueSlice {
    pub fn centre(&self, i: usize, j: usize) -> (f64, f64) {
        let dx = (self.x[1] - self.x[0]) / self.nx as f64;
        let dy = (self.y[1] - self.y[0]) / self.ny as f64;
        (self.x[0] + (i as f64 + 0.5) * dx, self.y[0] + (j as f64 + 0.5) * dy)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }
}

pub fn value_slice(src: &dyn ValueSource, phi: f64, v: f64, x: [f64; 2], y: [f64; 2], nx: usize, ny: usize) -> ValueSlice {
    let mut s = ValueSlice { phi, v, x, y, nx, ny, values: Vec::with_capacity(nx * ny) };
    for j in 0..ny {
        for i in 0..nx {
            let (px, py) = s.centre(i, j);
            let st = VehicleState { x: px, y: py, phi, vx: v, ..Default::default() };
            s.values.push(src.v(&st));
        }
    }
    s
}

/// Uses the constraint itself as the value, `V = h / divisor`: no lookahead,
/// so only suitable for plumbing tests and as a lower baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintProxy {
    pub field: SafetyField,
    pub divisor: f64,
}

impl ConstraintProxy {
    pub fn new(cfg: &crate::scenario::ScenarioConfig) -> Self {
        Self { field: cfg.field(), divisor: 6.0 }
    }
}

impl ValueSource for ConstraintProxy {
    fn v(&self, x: &VehicleState) -> f64 {
        self.field.h_state(x) / self.divisor
    }
    fn q(&self, x: &VehicleState, _u: &ControlInput) -> f64 {
        self.v(x)
    }
    fn out_of_domain(&self, _x: &VehicleState) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Obstacle, SafetyField};
    use crate::par::ExecMode;
    use crate::reach::{solve_grid, GridSpec, ReducedDynamics, SolveOptions};

    #[test]
    fn projection_roundtrip() {
        let s = [3.0, -1.0, 0.2, 9.0];
        let back = project(&lift(&s));
        for i in 0..4 {
            assert!((back[i] - s[i]).abs() < 1e-12);
        }
        let x = VehicleState { vx: 3.0, vy: 4.0, ..Default::default() };
        assert_eq!(project(&x)[3], 5.0);
        assert!((project(&x)[2] - (4.0f64).atan2(3.0)).abs() < 1e-15);
    }

    #[test]
    fn grid_source_matches_grid() {
        let field = SafetyField::new(Obstacle::canonical_ellipse());
        let opts = SolveOptions { mode: ExecMode::Sequential, ..Default::default() };
        let g = solve_grid(&ReducedDynamics::default(), &field, &GridSpec::coarse(), &opts).unwrap();
        let src = GridSource::new(Arc::new(g), VehicleParams::default());
        let x = VehicleState { x: 10.0, y: 1.0, vx: 10.0, ..Default::default() };
        assert_eq!(src.v(&x), src.grid.value(&[10.0, 1.0, 0.0, 10.0]));
        let q = src.q(&x, &ControlInput::new(0.0, 0.0));
        assert!(q >= src.v(&x) - 1e-9);
        assert!(!src.out_of_domain(&x));
        assert!(src.out_of_domain(&VehicleState { x: 500.0, ..x }));
        let self_check = crate::reach::sign_agreement(&src.grid, &src, 500, 0.5, 1);
        assert_eq!((self_check.samples, self_check.agreement), (500, 1.0));
        // Deep inside the obstacle every action is unsafe.
        let inside = VehicleState { x: 23.0, vx: 5.0, ..Default::default() };
        assert!(src.q(&inside, &ControlInput::new(0.3, -500.0)) > 0.0);
    }
}
