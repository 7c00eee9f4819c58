use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DynamicsError, TireParams};

/// Body, wheel and integration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Total mass (kg).
    pub m: f64,
    /// Yaw inertia (kg·m²).
    pub iz: f64,
    /// Front / rear track width (m).
    pub wf: f64,
    pub wr: f64,
    /// Centroid to front / rear axle (m).
    pub la: f64,
    pub lb: f64,
    pub wheel_radius: f64,
    pub wheel_inertia: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Steering bound (rad) and rear-axle torque bound (N·m).
    pub delta_max: f64,
    pub torque_max: f64,
    /// Floor on speeds used as slip denominators (m/s).
    pub low_speed_floor: f64,
    /// Recorded for completeness; no roll degree of freedom is modelled.
    pub roll_inertia: f64,
    /// Magnitudes beyond which an integration step is declared divergent.
    pub max_speed: f64,
    pub max_yaw_rate: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1615.0,
            iz: 2795.0,
            wf: 1.6,
            wr: 1.6,
            la: 1.2,
            lb: 1.5,
            wheel_radius: 0.335,
            wheel_inertia: 1.2,
            dt: 0.01,
            delta_max: 0.5,
            torque_max: 3000.0,
            low_speed_floor: 0.5,
            roll_inertia: 251.0,
            max_speed: 80.0,
            max_yaw_rate: 10.0,
        }
    }
}

pub const GRAVITY: f64 = 9.81;

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.la + self.lb
    }

    /// Static vertical load per wheel on the front and rear axle.
    pub fn static_loads(&self) -> (f64, f64) {
        let w = self.m * GRAVITY;
        let l = self.wheelbase();
        (0.5 * w * self.lb / l, 0.5 * w * self.la / l)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [self.m, self.iz, self.la, self.lb, self.wf, self.wr, self.wheel_radius, self.wheel_inertia];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(DynamicsError::InvalidParams("mass, inertia and geometry must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt <= 0.02) {
            return Err(DynamicsError::InvalidParams(format!("dt must lie in (0, 0.02], got {}", self.dt)));
        }
        if !(self.delta_max > 0.0 && self.torque_max > 0.0 && self.low_speed_floor > 0.0) {
            return Err(DynamicsError::InvalidParams("control bounds and speed floor must be positive".into()));
        }
        Ok(())
    }
}

/// Vehicle and tire parameter file (`table2.cfg`), TOML key/value tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamFile {
    pub vehicle: VehicleParams,
    pub tire: TireParams,
}

impl ParamFile {
    pub fn parse(text: &str) -> Result<Self, DynamicsError> {
        let pf: ParamFile =
            toml::from_str(text).map_err(|e| DynamicsError::InvalidParams(format!("parameter file: {e}")))?;
        pf.vehicle.validate()?;
        pf.tire.validate()?;
        Ok(pf)
    }

    pub fn load(path: &Path) -> Result<Self, DynamicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DynamicsError::InvalidParams(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table2_parses_to_defaults() {
        let text = include_str!("../../../../config/table2.cfg");
        let pf = ParamFile::parse(text).unwrap();
        assert_eq!(pf.vehicle.m, 1615.0);
        assert_eq!(pf.vehicle.iz, 2795.0);
        assert_eq!(pf, ParamFile::default());
    }

    #[test]
    fn rejects_large_step() {
        let err = ParamFile::parse("[vehicle]\ndt = 0.05\n");
        assert!(err.is_err());
    }
}
