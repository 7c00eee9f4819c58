//! Scenario configuration files.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::AuthorityParams;
use crate::driver::{DriverParams, PathLine};
use crate::geometry::{Obstacle, SafetyField};
use crate::rl::reward::RewardParams;
use crate::value::ValueSource;
use crate::vehicle::{ParamFile, TireParams, VehicleParams, VehicleState};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CaiSchedule {
    Fixed { value: f64 },
    /// Drawn once per episode.
    Uniform { low: f64, high: f64 },
}

impl CaiSchedule {
    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            CaiSchedule::Fixed { value } => value,
            CaiSchedule::Uniform { low, high } => rng.random_range(low..=high),
        }
    }
}

/// Uniform per-episode perturbation of the spawn state (half-widths).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpawnJitter {
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

/// Longitudinal / lateral extent of valid positions; episodes leaving it end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Default for DomainBox {
    fn default() -> Self {
        Self { x: [-10.0, 90.0], y: [-20.0, 20.0] }
    }
}

impl DomainBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub obstacle: Obstacle,
    pub spawn: VehicleState,
    pub spawn_jitter: SpawnJitter,
    pub v_ori: f64,
    /// The obstacle becomes known once its edge is this close (m).
    pub detection_distance: f64,
    /// Episode length (s).
    pub horizon: f64,
    pub driver_preset: String,
    pub driver: DriverParams,
    /// When set, the cognitive delay is drawn uniformly per episode.
    pub driver_t_m_range: Option<[f64; 2]>,
    pub cai: CaiSchedule,
    /// Insight is assigned once the scaled value enters this window.
    pub cai_window: [f64; 2],
    pub authority: AuthorityParams,
    pub reward: RewardParams,
    /// Factor mapping reachability values onto the units the driver,
    /// authority and reward constants are calibrated in.
    pub value_scale: f64,
    /// When set, `value_scale` is replaced per value source so that the
    /// nominal spawn state reads this value.
    pub value_anchor: Option<f64>,
    /// Simulation steps per machine decision.
    pub agent_period: usize,
    pub domain: DomainBox,
    pub vehicle: VehicleParams,
    pub tire: TireParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "canonical-ellipse".into(),
            seed: 7,
            obstacle: Obstacle::canonical_ellipse(),
            spawn: VehicleState { vx: 12.5, ..Default::default() },
            spawn_jitter: SpawnJitter::default(),
            v_ori: 12.5,
            detection_distance: 15.0,
            horizon: 6.0,
            driver_preset: "normal".into(),
            driver: DriverParams::default(),
            driver_t_m_range: None,
            cai: CaiSchedule::Fixed { value: 0.8 },
            cai_window: [-15.0, 0.0],
            authority: AuthorityParams::default(),
            reward: RewardParams::default(),
            value_scale: 6.0,
            value_anchor: Some(-10.0),
            agent_period: 10,
            domain: DomainBox::default(),
            vehicle: VehicleParams::default(),
            tire: TireParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn canonical() -> Self {
        Self::default()
    }

    pub fn with_obstacle(name: &str, obstacle: Obstacle) -> Self {
        Self { name: name.into(), obstacle, ..Self::default() }
    }

    /// Parse TOML. `[driver]` keys override the named preset; an optional
    /// `vehicle_params` path loads a parameter file relative to `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let preset_name = raw.get("driver_preset").and_then(|v| v.as_str()).unwrap_or("normal").to_string();
        let (preset, preset_cai) = DriverParams::preset(&preset_name)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown driver preset '{preset_name}'")))?;
        let mut driver = toml::Table::try_from(preset).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(toml::Value::Table(over)) = raw.remove("driver") {
            for (k, v) in over {
                if !driver.contains_key(&k) {
                    return Err(ConfigError::Invalid(format!("unknown driver key '{k}'")));
                }
                driver.insert(k, v);
            }
        }
        raw.insert("driver".into(), toml::Value::Table(driver));
        if !raw.contains_key("cai") {
            raw.insert("cai".into(), toml::Value::try_from(CaiSchedule::Fixed { value: preset_cai }).unwrap());
        }
        let params_path = raw.remove("vehicle_params").and_then(|v| v.as_str().map(PathBuf::from));
        let mut cfg: ScenarioConfig =
            toml::Value::Table(raw).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let Some(p) = params_path {
            let p = base.map(|b| b.join(&p)).unwrap_or(p);
            let pf = ParamFile::load(&p).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            cfg.vehicle = pf.vehicle;
            cfg.tire = pf.tire;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        Self::parse(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.obstacle.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.vehicle.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.tire.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.driver.validate().map_err(ConfigError::Invalid)?;
        self.authority.validate().map_err(ConfigError::Invalid)?;
        self.reward.validate().map_err(ConfigError::Invalid)?;
        if self.field().h_state(&self.spawn) >= 0.0 {
            return inv("spawn lies inside the obstacle".into());
        }
        if !(self.horizon > 0.0) || self.agent_period == 0 || !(self.value_scale > 0.0) {
            return inv("horizon, agent_period and value_scale must be positive".into());
        }
        if !self.domain.contains(self.spawn.x, self.spawn.y) {
            return inv("spawn outside the domain box".into());
        }
        let j = self.spawn_jitter;
        if !(j.x >= 0.0 && j.y >= 0.0 && j.v >= 0.0) {
            return inv("spawn jitter must be non-negative".into());
        }
        if self.value_anchor.is_some_and(|a| !(a < 0.0)) {
            return inv("value_anchor must be negative".into());
        }
        if let Some([lo, hi]) = self.driver_t_m_range {
            if !(lo >= 0.0 && hi >= lo) {
                return inv(format!("bad driver delay range [{lo}, {hi}]"));
            }
        }
        if let CaiSchedule::Uniform { low, high } = self.cai {
            if !(0.0..=1.0).contains(&low) || !(low..=1.0).contains(&high) {
                return inv(format!("bad insight range [{low}, {high}]"));
            }
        }
        Ok(())
    }

    pub fn field(&self) -> SafetyField {
        SafetyField::new(self.obstacle)
    }

    pub fn path(&self) -> PathLine {
        PathLine { x: self.spawn.x, y: self.spawn.y, phi: self.spawn.phi }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.vehicle.dt).round() as usize
    }

    /// Longitudinal reference for the progress reward: the obstacle-free
    /// distance covered at `v_ori` over the horizon.
    pub fn x_ref(&self) -> f64 {
        self.path().along(self.spawn.x, self.spawn.y) + self.v_ori * self.horizon
    }

    /// Factor from a source's native values to the scaled values used by the
    /// driver, authority and reward.
    pub fn resolve_scale(&self, value: &dyn ValueSource) -> Result<f64, ConfigError> {
        match self.value_anchor {
            None => Ok(self.value_scale),
            Some(a) => {
                let v = value.v(&self.spawn);
                if v < -1e-6 && v.is_finite() {
                    Ok(a / v)
                } else {
                    Err(ConfigError::Invalid(format!("cannot anchor the value scale: spawn value is {v}")))
                }
            }
        }
    }

    /// Reference position of the progress reward.
    pub fn progress_ref(&self) -> f64 {
        self.reward.x_r.unwrap_or_else(|| self.x_ref())
    }

    /// Distance from `(x, y)` to the obstacle's bounding box.
    pub fn edge_distance(&self, x: f64, y: f64) -> f64 {
        let ((x0, y0), (x1, y1)) = self.obstacle.bounding_box();
        let dx = (x0 - x).max(0.0).max(x - x1);
        let dy = (y0 - y).max(0.0).max(y - y1);
        dx.hypot(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = ScenarioConfig::default();
        let back = ScenarioConfig::parse(&c.to_toml(), None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_with_overrides() {
        let text = r#"
            driver_preset = "distracted"
            [driver]
            k_lambda = 12.0
        "#;
        let c = ScenarioConfig::parse(text, None).unwrap();
        assert_eq!(c.driver.t_m, 0.75);
        assert_eq!(c.driver.k_lambda, 12.0);
        assert_eq!(c.cai, CaiSchedule::Fixed { value: 0.3 });
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ScenarioConfig::parse("driver_preset = \"sleepy\"", None).is_err());
        assert!(ScenarioConfig::parse("[driver]\nbogus = 1.0", None).is_err());
        assert!(ScenarioConfig::parse("[spawn]\nx = 23.0\nvx = 12.5", None).is_err());
        assert!(ScenarioConfig::parse("horizon = -1.0", None).is_err());
    }

    #[test]
    fn canonical_geometry() {
        let c = ScenarioConfig::canonical();
        assert_eq!(c.edge_distance(0.0, 0.0), 15.0);
        assert_eq!(c.x_ref(), 75.0);
    }
}
