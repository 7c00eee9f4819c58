//! One live shared-control session: human input in, blended control and
//! telemetry out, on a single simulation clock.

use std::collections::VecDeque;
use std::sync::Arc;

use super::protocol::{ConfigUpdate, SlicePayload, Telemetry};
use crate::authority::{authority_weight, blend, compute_caa, compute_cai};
use crate::env::TerminalCause;
use crate::harness::metrics::{MetricsReport, TimingStats, INTERVENTION_TOL};
use crate::rl::{build_obs, Agent, Method, ObsInputs};
use crate::scenario::ScenarioConfig;
use crate::value::{value_slice, ValueSource};
use crate::vehicle::{ControlInput, Vehicle, VehicleState};

/// Everything needed to start a session on one scenario.
#[derive(Clone)]
pub struct ScenarioEntry {
    pub cfg: ScenarioConfig,
    pub value: Arc<dyn ValueSource>,
    pub agent: Option<Arc<Agent>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionSettings {
    /// Inputs older than this start to decay (s).
    pub staleness: f64,
    /// Linear decay duration to neutral (s).
    pub decay: f64,
    /// Moving-average window of the measured insight (s).
    pub cai_window: f64,
    /// Largest slice side length; larger requests are clamped.
    pub max_slice_resolution: usize,
    /// Speed-hold gain of the neutral torque (N·m per m/s).
    pub hold_gain: f64,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self { staleness: 0.2, decay: 0.3, cai_window: 0.2, max_slice_resolution: 160, hold_gain: 500.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Status {
    Idle,
    Running,
    Terminated(TerminalCause),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HumanInput {
    steer: f64,
    throttle: f64,
    received_at: f64,
}

/// Machine steering candidates for the value-greedy fallback policy.
const GREEDY_CANDIDATES: usize = 21;
const DEFAULT_SLICE_RESOLUTION: usize = 64;

#[derive(Default)]
struct Accum {
    collided: bool,
    nsad_sum: f64,
    nsad_n: usize,
    step_ms: Vec<f64>,
}

pub struct Session {
    pub scenario_id: String,
    entry: ScenarioEntry,
    pub settings: SessionSettings,
    vehicle: Vehicle,
    scale: f64,
    pub t: f64,
    k: u64,
    pub status: Status,
    input: Option<HumanInput>,
    hold_speed: f64,
    cai_hist: VecDeque<f64>,
    detected: bool,
    u_m: f64,
    u_m_prev: f64,
    accum: Accum,
}

impl Session {
    pub fn new(scenario_id: &str, entry: ScenarioEntry, settings: SessionSettings) -> Result<Self, String> {
        entry.cfg.validate().map_err(|e| e.to_string())?;
        let scale = entry.cfg.resolve_scale(entry.value.as_ref()).map_err(|e| e.to_string())?;
        let c = &entry.cfg;
        let vehicle = Vehicle::new(c.spawn, c.vehicle, c.tire);
        Ok(Self {
            scenario_id: scenario_id.into(),
            hold_speed: c.spawn.vx,
            vehicle,
            scale,
            entry,
            settings,
            t: 0.0,
            k: 0,
            status: Status::Idle,
            input: None,
            cai_hist: VecDeque::new(),
            detected: false,
            u_m: 0.0,
            u_m_prev: 0.0,
            accum: Accum::default(),
        })
    }

    pub fn cfg(&self) -> &ScenarioConfig {
        &self.entry.cfg
    }

    pub fn state(&self) -> &VehicleState {
        &self.vehicle.state
    }

    /// Fresh run at the scenario spawn; keeps the session settings.
    pub fn reset(&mut self) {
        let settings = self.settings;
        let fresh = Self::new(&self.scenario_id, self.entry.clone(), settings).expect("entry validated at construction");
        *self = fresh;
        self.status = Status::Running;
    }

    pub fn apply_config(&mut self, c: &ConfigUpdate) -> Result<(), String> {
        let ok = |v: Option<f64>| v.is_none_or(|x| x.is_finite() && x >= 0.0);
        if !ok(c.staleness_ms) || !ok(c.decay_ms) {
            return Err("staleness_ms and decay_ms must be non-negative".into());
        }
        if let Some(s) = c.staleness_ms {
            self.settings.staleness = s / 1e3;
        }
        if let Some(d) = c.decay_ms {
            self.settings.decay = d / 1e3;
        }
        Ok(())
    }

    /// Record a human command, stamped with the session clock.
    pub fn set_input(&mut self, steer: f64, throttle: f64) {
        self.input = Some(HumanInput { steer: steer.clamp(-1.0, 1.0), throttle: throttle.clamp(-1.0, 1.0), received_at: self.t });
    }

    pub fn input_age(&self) -> Option<f64> {
        self.input.map(|i| self.t - i.received_at)
    }

    fn hold_torque(&self) -> f64 {
        let p = &self.entry.cfg.vehicle;
        (self.settings.hold_gain * (self.hold_speed - self.vehicle.state.vx)).clamp(-p.torque_max, p.torque_max)
    }

    /// Human command after the staleness rule: fresh inputs pass through,
    /// stale ones fade linearly to zero steer and speed-hold torque.
    pub fn driver_command(&self) -> ControlInput {
        let p = &self.entry.cfg.vehicle;
        let neutral = ControlInput::new(0.0, self.hold_torque());
        let Some(inp) = self.input else { return neutral };
        let age = self.t - inp.received_at;
        let w = if age <= self.settings.staleness {
            1.0
        } else if self.settings.decay <= 0.0 {
            0.0
        } else {
            (1.0 - (age - self.settings.staleness) / self.settings.decay).clamp(0.0, 1.0)
        };
        let raw = ControlInput::new(inp.steer * p.delta_max, inp.throttle * p.torque_max);
        ControlInput::new(w * raw.delta_f, w * raw.torque_rear + (1.0 - w) * neutral.torque_rear)
    }

    fn cai_len(&self) -> usize {
        ((self.settings.cai_window / self.entry.cfg.vehicle.dt).round() as usize).max(1)
    }

    fn machine_action(&self, v_h: f64, caa: f64, cai: f64, gamma: f64, u_d: &ControlInput) -> f64 {
        let c = &self.entry.cfg;
        let x = &self.vehicle.state;
        match &self.entry.agent {
            Some(agent) => {
                let obs = build_obs(
                    Method::Proposed,
                    &ObsInputs { x, v_h, caa, cai, gamma_auth: gamma, u_d, u_m_prev: self.u_m_prev, obstacle: &c.obstacle },
                );
                agent.act_deterministic(&obs) * c.vehicle.delta_max
            }
            None => {
                // Steering that minimises the action value, nearest the driver on ties.
                let dm = c.vehicle.delta_max;
                let mut best = (f64::INFINITY, f64::INFINITY, 0.0);
                for i in 0..GREEDY_CANDIDATES {
                    let d = -dm + 2.0 * dm * i as f64 / (GREEDY_CANDIDATES - 1) as f64;
                    let q = self.entry.value.q(x, &ControlInput::new(d, u_d.torque_rear));
                    let key = (q, (d - u_d.delta_f).abs());
                    if key < (best.0, best.1) {
                        best = (key.0, key.1, d);
                    }
                }
                best.2
            }
        }
    }

    /// Advance one control period. Returns the frame describing the step, or
    /// `None` when the session is not running.
    pub fn tick(&mut self) -> Option<Telemetry> {
        if self.status != Status::Running {
            return None;
        }
        let started = std::time::Instant::now();
        let c = self.entry.cfg.clone();
        let x = self.vehicle.state;
        if self.input_age().is_some_and(|a| a <= self.settings.staleness) {
            self.hold_speed = x.vx;
        }
        let u_d = self.driver_command();
        let v_h = self.scale * self.entry.value.v(&x);
        if !self.detected && c.edge_distance(x.x, x.y) <= c.detection_distance {
            self.detected = true;
        }
        let a = &c.authority;
        let (caa, _) = compute_caa(v_h, a);
        let cai_now = if self.detected { compute_cai(self.scale * self.entry.value.q(&x, &u_d), v_h, a) } else { 1.0 };
        self.cai_hist.push_back(cai_now);
        while self.cai_hist.len() > self.cai_len() {
            self.cai_hist.pop_front();
        }
        let cai = self.cai_hist.iter().sum::<f64>() / self.cai_hist.len() as f64;
        let gamma = if self.detected { authority_weight(cai, caa, a).gamma_auth } else { a.gamma_min };
        if !self.detected {
            // Before detection the machine agrees with the driver.
            self.u_m = u_d.delta_f;
        } else if self.k % c.agent_period as u64 == 0 {
            self.u_m_prev = self.u_m;
            self.u_m = self.machine_action(v_h, caa, cai, gamma, &u_d);
        }
        let u_f = blend(self.u_m, &u_d, gamma);

        let frame = Telemetry {
            t: self.t,
            x: x.to_array(),
            v_h,
            caa,
            cai,
            gamma_auth: gamma,
            u_d: [u_d.delta_f, u_d.torque_rear],
            u_m: self.u_m,
            u_f: [u_f.delta_f, u_f.torque_rear],
            phase: if !self.detected {
                "cruise"
            } else if gamma > a.gamma_min + INTERVENTION_TOL {
                "assist"
            } else {
                "monitor"
            }
            .into(),
            input_age: self.input_age(),
        };
        if gamma > a.gamma_min + INTERVENTION_TOL {
            self.accum.nsad_sum += (self.u_m - u_d.delta_f).abs() / (2.0 * c.vehicle.delta_max);
            self.accum.nsad_n += 1;
        }

        let cause = match self.vehicle.advance(&u_f) {
            Err(_) => Some(TerminalCause::Diverged),
            Ok(next) => {
                self.t = (self.k + 1) as f64 * c.vehicle.dt;
                self.k += 1;
                if c.field().h_state(&next) >= 0.0 {
                    self.accum.collided = true;
                    Some(TerminalCause::Collision)
                } else if !c.domain.contains(next.x, next.y) {
                    Some(TerminalCause::DomainExit)
                } else {
                    None
                }
            }
        };
        if let Some(c) = cause {
            self.status = Status::Terminated(c);
        }
        self.accum.step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        Some(frame)
    }

    /// Frame for the current state without stepping, e.g. right after reset.
    pub fn snapshot(&self) -> Telemetry {
        let c = &self.entry.cfg;
        let x = self.vehicle.state;
        let v_h = self.scale * self.entry.value.v(&x);
        let (caa, _) = compute_caa(v_h, &c.authority);
        let u_d = self.driver_command();
        let u_m = if self.detected { self.u_m } else { u_d.delta_f };
        let gamma = c.authority.gamma_min;
        let u_f = blend(u_m, &u_d, gamma);
        Telemetry {
            t: self.t,
            x: x.to_array(),
            v_h,
            caa,
            cai: self.cai_hist.back().copied().unwrap_or(1.0),
            gamma_auth: gamma,
            u_d: [u_d.delta_f, u_d.torque_rear],
            u_m,
            u_f: [u_f.delta_f, u_f.torque_rear],
            phase: "cruise".into(),
            input_age: self.input_age(),
        }
    }

    /// Summary of the run so far.
    pub fn metrics(&self) -> MetricsReport {
        let c = &self.entry.cfg;
        MetricsReport {
            episodes: 1,
            success_rate: if self.accum.collided { 0.0 } else { 1.0 },
            mfd: (self.vehicle.state.x - c.spawn.x).max(0.0),
            mnsad: if self.accum.nsad_n > 0 { self.accum.nsad_sum / self.accum.nsad_n as f64 } else { 0.0 },
            intervention_steps: self.accum.nsad_n,
            braking_episodes: 0,
            timing: TimingStats::from_samples(&self.accum.step_ms),
        }
    }

    pub fn step_times_ms(&self) -> &[f64] {
        &self.accum.step_ms
    }

    /// Scaled value over the scenario domain at fixed heading and speed.
    pub fn cars_slice(&self, phi: f64, v: f64, resolution: Option<usize>) -> Result<SlicePayload, String> {
        if !(phi.is_finite() && v.is_finite() && v >= 0.0) {
            return Err("slice needs finite phi and non-negative v".into());
        }
        let want = resolution.unwrap_or(DEFAULT_SLICE_RESOLUTION);
        let max = self.settings.max_slice_resolution;
        let n = want.clamp(2, max);
        let notice = (n != want).then(|| format!("resolution {want} clamped to {n}"));
        let d = self.entry.cfg.domain;
        let dx = d.x[1] - d.x[0];
        let dy = d.y[1] - d.y[0];
        // Square cells: the longer side gets `n` cells.
        let (nx, ny) = if dx >= dy { (n, ((n as f64 * dy / dx).round() as usize).max(2)) } else { (((n as f64 * dx / dy).round() as usize).max(2), n) };
        let mut s = value_slice(self.entry.value.as_ref(), phi, v, d.x, d.y, nx, ny);
        s.values.iter_mut().for_each(|x| *x *= self.scale);
        let mut contour = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let pos = s.at(i, j) > 0.0;
                let differs = |a: usize, b: usize| (s.at(a, b) > 0.0) != pos;
                contour[j * nx + i] = (i > 0 && differs(i - 1, j)) || (i + 1 < nx && differs(i + 1, j)) || (j > 0 && differs(i, j - 1)) || (j + 1 < ny && differs(i, j + 1));
            }
        }
        Ok(SlicePayload { phi, v, x: d.x, y: d.y, nx, ny, values: s.values, contour, notice })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::ConstraintProxy;

    fn session() -> Session {
        let cfg = ScenarioConfig::canonical();
        let value: Arc<dyn ValueSource> = Arc::new(ConstraintProxy::new(&cfg));
        let mut s = Session::new("ellipse", ScenarioEntry { cfg, value, agent: None }, SessionSettings::default()).unwrap();
        s.reset();
        s
    }

    #[test]
    fn reset_starts_at_spawn_with_zero_time() {
        let mut s = session();
        for _ in 0..30 {
            s.tick();
        }
        assert!(s.t > 0.0);
        s.reset();
        assert_eq!(s.t, 0.0);
        assert_eq!(s.state(), &s.cfg().spawn);
        assert_eq!(s.tick().unwrap().t, 0.0);
    }

    #[test]
    fn stale_input_decays_to_neutral() {
        let mut s = session();
        s.set_input(0.6, 0.5);
        let dm = s.cfg().vehicle.delta_max;
        let fresh = s.driver_command();
        assert_eq!(fresh.delta_f, 0.6 * dm);
        // Within the window nothing changes.
        for _ in 0..20 {
            s.tick();
        }
        assert_eq!(s.driver_command().delta_f, 0.6 * dm);
        // Half-way through the decay.
        for _ in 0..15 {
            s.tick();
        }
        assert!((s.driver_command().delta_f - 0.3 * dm).abs() < 1e-9);
        for _ in 0..20 {
            s.tick();
        }
        let neutral = s.driver_command();
        assert_eq!(neutral.delta_f, 0.0);
        assert!((neutral.torque_rear - s.hold_torque()).abs() < 1e-12);
    }

    #[test]
    fn telemetry_satisfies_blend() {
        let mut s = session();
        let mut k = 0;
        while let Some(f) = s.tick() {
            s.set_input((k as f64 * 0.05).sin(), 0.1);
            let expect = f.gamma_auth * f.u_m + (1.0 - f.gamma_auth) * f.u_d[0];
            assert!((f.u_f[0] - expect).abs() <= 1e-12);
            assert_eq!(f.u_f[1], f.u_d[1]);
            k += 1;
            if k > 300 {
                break;
            }
        }
    }

    #[test]
    fn slices_are_reproducible_and_clamped() {
        let s = session();
        let a = s.cars_slice(0.0, 12.5, Some(40)).unwrap();
        assert_eq!(a, s.cars_slice(0.0, 12.5, Some(40)).unwrap());
        assert!(a.notice.is_none());
        let big = s.cars_slice(0.0, 12.5, Some(10_000)).unwrap();
        assert!(big.notice.is_some() && big.nx.max(big.ny) == s.settings.max_slice_resolution);
        assert!(s.cars_slice(f64::NAN, 1.0, None).is_err());
    }

    #[test]
    fn idle_session_does_not_step() {
        let cfg = ScenarioConfig::canonical();
        let value: Arc<dyn ValueSource> = Arc::new(ConstraintProxy::new(&cfg));
        let mut s = Session::new("e", ScenarioEntry { cfg, value, agent: None }, SessionSettings::default()).unwrap();
        assert!(s.tick().is_none());
        assert_eq!(s.status, Status::Idle);
    }
}
