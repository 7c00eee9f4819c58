//! Closed-loop shared-control episode: driver, authority, machine, blend and
//! vehicle dynamics, with a per-step log.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::{authority_weight, blend, compute_caa, AuthorityState};
use crate::driver::{DriverModel, Phase};
use crate::geometry::SafetyField;
use crate::rl::state::{potential_risk, ObsInputs};
use crate::rl::{build_obs, safety_reward, Method, StepReward, OBS_DIM};
use crate::scenario::ScenarioConfig;
use crate::value::ValueSource;
use crate::vehicle::{step as vehicle_step, ControlInput, DynamicsError, Vehicle, VehicleState, WheelSpeeds};

pub const LOG_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("scenario rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("non-finite observation at t = {0:.2} s")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCause {
    Collision,
    CarsEntry,
    DomainExit,
    Horizon,
    Diverged,
}

/// Who steers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DriverOnly,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvOptions {
    pub method: Method,
    pub mode: Mode,
    /// End the episode when the scaled value turns positive.
    pub terminate_on_cars: bool,
    /// Insight used instead of the scenario schedule.
    pub cai: Option<f64>,
}

impl EnvOptions {
    /// Training semantics of `method`.
    pub fn training(method: Method) -> Self {
        Self { method, mode: Mode::Shared, terminate_on_cars: method.terminates_on_cars(), cai: None }
    }

    /// Full-length evaluation episode that stops only on collision.
    pub fn evaluation(method: Method, mode: Mode) -> Self {
        Self { method, mode, terminate_on_cars: false, cai: None }
    }
}

/// One 10 ms control step, recorded before the dynamics advance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: VehicleState,
    /// Constraint value at `x`.
    pub h: f64,
    /// Scaled reachability value at `x`.
    pub v_h: f64,
    pub detected: bool,
    pub caa: f64,
    pub cai: f64,
    pub gamma_auth: f64,
    pub u_d: ControlInput,
    pub u_m: f64,
    pub u_f: ControlInput,
    pub phase: Phase,
    pub v_td: f64,
    pub braking: bool,
}

/// Reward of one machine decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// Index of the first step the decision applied to.
    pub step: usize,
    pub u_m: f64,
    /// Terms under the method's own reward.
    pub reward: StepReward,
    /// Safety term of the value-based reward, kept for cross-method scoring.
    pub value_safety: f64,
    /// Scaled value at the end of the decision period.
    pub v_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub method: Method,
    pub mode: Mode,
    pub dt: f64,
    pub delta_max: f64,
    pub gamma_min: f64,
    pub cai_episode: f64,
    pub spawn: VehicleState,
    pub steps: Vec<StepRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub final_state: VehicleState,
    pub final_h: f64,
    pub final_v_h: f64,
    pub terminal: TerminalCause,
    pub terminal_reward: f64,
    /// Per-step compute time of the control pipeline (ms).
    pub step_ms: Vec<f64>,
}

impl EpisodeLog {
    pub fn collided(&self) -> bool {
        self.terminal == TerminalCause::Collision || self.steps.iter().any(|s| s.h >= 0.0) || self.final_h >= 0.0
    }

    /// Sum of step terms plus the terminal reward.
    pub fn total_reward(&self) -> f64 {
        self.decisions.iter().map(|d| d.reward.total()).sum::<f64>() + self.terminal_reward
    }

    pub fn forward_distance(&self) -> f64 {
        self.final_state.x - self.spawn.x
    }

    pub fn braking_seen(&self) -> bool {
        self.steps.iter().any(|s| s.braking)
    }

    /// Return under the value-based reward, truncated with the hard penalty
    /// at the first decision ending inside the CARS. Comparable across
    /// methods.
    pub fn common_return(&self, cfg: &ScenarioConfig) -> f64 {
        let p = &cfg.reward;
        let mut total = 0.0;
        for d in &self.decisions {
            total += d.value_safety + d.reward.collaboration + d.reward.smoothness;
            if d.v_end > 0.0 {
                return total - p.k_hc;
            }
        }
        if self.collided() || self.final_v_h > 0.0 {
            total - p.k_hc
        } else {
            total + p.k_od * (self.final_state.x - cfg.progress_ref())
        }
    }
}

/// Result of one machine decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
    pub terminal: Option<TerminalCause>,
}

/// Per-state quantities computed once and shared by the driver, the
/// authority and the observation.
#[derive(Debug, Clone, Copy)]
struct Context {
    h: f64,
    v_h: f64,
}

pub struct Env<'a> {
    cfg: &'a ScenarioConfig,
    value: &'a dyn ValueSource,
    opts: EnvOptions,
    field: SafetyField,
    vehicle: Vehicle,
    driver: DriverModel,
    k: usize,
    horizon_steps: usize,
    detected: bool,
    cai_episode: f64,
    cai_active: Option<f64>,
    ctx: Context,
    scale: f64,
    u_m: f64,
    u_m_prev: f64,
    last_u_d: ControlInput,
    log: EpisodeLog,
    done: Option<TerminalCause>,
    timing: bool,
}

impl<'a> Env<'a> {
    pub fn new(cfg: &'a ScenarioConfig, value: &'a dyn ValueSource, opts: EnvOptions, seed: u64) -> Result<Self, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cai_episode = opts.cai.unwrap_or_else(|| cfg.cai.draw(&mut rng));
        let j = cfg.spawn_jitter;
        let mut spawn = cfg.spawn;
        let mut jitter = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        spawn.x += jitter(j.x);
        spawn.y += jitter(j.y);
        spawn.vx = (spawn.vx + jitter(j.v)).max(0.0);
        let driver_seed = rng.random::<u64>();
        let mut driver_params = cfg.driver;
        if let Some([lo, hi]) = cfg.driver_t_m_range {
            driver_params.t_m = rng.random_range(lo..=hi);
        }

        let field = cfg.field();
        if field.h_state(&spawn) >= 0.0 || !cfg.domain.contains(spawn.x, spawn.y) {
            return Err(EnvError::Rejected(format!("spawn {spawn:?} is inside the obstacle or outside the domain")));
        }
        if value.out_of_domain(&spawn) {
            return Err(EnvError::Rejected("spawn lies outside the value source's domain".into()));
        }
        let p = cfg.vehicle;
        let driver = DriverModel::new(driver_params, cfg.path(), cfg.v_ori, p.delta_max, p.torque_max, p.dt, driver_seed);
        let vehicle = Vehicle::new(spawn, p, cfg.tire);
        let scale = cfg.resolve_scale(value).map_err(|e| EnvError::Rejected(e.to_string()))?;
        let ctx = Context { h: field.h_state(&spawn), v_h: scale * value.v(&spawn) };
        let log = EpisodeLog {
            schema: LOG_SCHEMA,
            scenario: cfg.name.clone(),
            seed,
            method: opts.method,
            mode: opts.mode,
            dt: p.dt,
            delta_max: p.delta_max,
            gamma_min: cfg.authority.gamma_min,
            cai_episode,
            spawn,
            steps: Vec::with_capacity(cfg.steps()),
            decisions: Vec::new(),
            final_state: spawn,
            final_h: ctx.h,
            final_v_h: ctx.v_h,
            terminal: TerminalCause::Horizon,
            terminal_reward: 0.0,
            step_ms: Vec::new(),
        };
        Ok(Self {
            cfg,
            value,
            opts,
            field,
            vehicle,
            driver,
            k: 0,
            horizon_steps: cfg.steps(),
            detected: false,
            cai_episode,
            cai_active: None,
            ctx,
            scale,
            u_m: 0.0,
            u_m_prev: 0.0,
            last_u_d: ControlInput::default(),
            log,
            done: None,
            timing: false,
        })
    }

    /// Record per-step compute times in the log.
    pub fn with_timing(mut self) -> Self {
        self.timing = true;
        self
    }

    pub fn state(&self) -> &VehicleState {
        &self.vehicle.state
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }

    pub fn detected(&self) -> bool {
        self.detected
    }

    /// Factor applied to the source's values.
    pub fn value_scale(&self) -> f64 {
        self.scale
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    fn update_detection(&mut self) {
        let s = self.vehicle.state;
        if !self.detected && self.cfg.edge_distance(s.x, s.y) <= self.cfg.detection_distance {
            self.detected = true;
        }
        if self.detected && self.cai_active.is_none() && self.ctx.v_h >= self.cfg.cai_window[0] {
            self.cai_active = Some(self.cai_episode);
        }
    }

    fn cai(&self) -> f64 {
        self.cai_active.unwrap_or(1.0)
    }

    fn authority(&self) -> AuthorityState {
        let p = &self.cfg.authority;
        let (caa, _) = compute_caa(self.ctx.v_h, p);
        let mut st = authority_weight(self.cai(), caa, p);
        if !self.detected || self.opts.mode == Mode::DriverOnly {
            st.gamma_auth = p.gamma_min;
        }
        st
    }

    /// Observation for the machine at the current state.
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let auth = self.authority();
        build_obs(
            self.opts.method,
            &ObsInputs {
                x: &self.vehicle.state,
                v_h: self.ctx.v_h,
                caa: auth.caa,
                cai: self.cai(),
                gamma_auth: auth.gamma_auth,
                u_d: &self.last_u_d,
                u_m_prev: self.u_m_prev,
                obstacle: &self.cfg.obstacle,
            },
        )
    }

    /// Scaled action value of holding machine steering `delta_m` against the
    /// driver's latest command at the current state.
    pub fn action_value(&self, delta_m: f64) -> f64 {
        let u_f = blend(delta_m, &self.last_u_d, self.authority().gamma_auth);
        self.scale * self.value.q(&self.vehicle.state, &u_f)
    }

    /// Advance one control step with the held machine steering.
    fn sim_step(&mut self) -> Result<(), EnvError> {
        let started = self.timing.then(std::time::Instant::now);
        self.update_detection();
        let t = self.k as f64 * self.vehicle.params.dt;
        let x = self.vehicle.state;
        let cai = self.cai();
        let out = self.driver.act(&x, &self.cfg.obstacle, self.ctx.v_h, cai, self.detected, t);
        let auth = self.authority();
        let shared = self.opts.mode == Mode::Shared && self.detected;
        let u_f = if shared { blend(self.u_m, &out.control, auth.gamma_auth) } else { out.control };
        self.log.steps.push(StepRecord {
            t,
            x,
            h: self.ctx.h,
            v_h: self.ctx.v_h,
            detected: self.detected,
            caa: auth.caa,
            cai,
            gamma_auth: auth.gamma_auth,
            u_d: out.control,
            u_m: if shared { self.u_m } else { 0.0 },
            u_f,
            phase: out.phase,
            v_td: out.v_td,
            braking: out.braking,
        });
        self.last_u_d = out.control;
        let next = match self.vehicle.advance(&u_f) {
            Ok(s) => s,
            Err(e) => {
                self.finish(TerminalCause::Diverged);
                return Err(e.into());
            }
        };
        self.k += 1;
        self.ctx = Context { h: self.field.h_state(&next), v_h: self.scale * self.value.v(&next) };
        if let Some(t0) = started {
            self.log.step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        self.check_terminal();
        Ok(())
    }

    fn check_terminal(&mut self) {
        let s = self.vehicle.state;
        let cause = if self.ctx.h >= 0.0 {
            Some(TerminalCause::Collision)
        } else if self.opts.terminate_on_cars && self.detected && self.ctx.v_h > 0.0 {
            Some(TerminalCause::CarsEntry)
        } else if !self.cfg.domain.contains(s.x, s.y) {
            Some(TerminalCause::DomainExit)
        } else if self.k >= self.horizon_steps {
            Some(TerminalCause::Horizon)
        } else {
            None
        };
        if let Some(c) = cause {
            self.finish(c);
        }
    }

    fn finish(&mut self, cause: TerminalCause) {
        let s = self.vehicle.state;
        let p = &self.cfg.reward;
        let penalised = match self.opts.method {
            Method::Proposed => self.ctx.v_h > 0.0 || cause == TerminalCause::Collision,
            _ => cause == TerminalCause::Collision,
        } || cause == TerminalCause::Diverged;
        self.log.final_state = s;
        self.log.final_h = self.ctx.h;
        self.log.final_v_h = self.ctx.v_h;
        self.log.terminal = cause;
        self.log.terminal_reward = if penalised { -p.k_hc } else { p.k_od * (s.x - self.cfg.progress_ref()) };
        self.done = Some(cause);
    }

    /// Run driver-only steps until the machine has something to decide:
    /// detection in shared mode, or the end of the episode otherwise.
    pub fn run_until_decision(&mut self) -> Result<(), EnvError> {
        while self.done.is_none() {
            self.update_detection();
            if self.opts.mode == Mode::Shared && self.detected {
                break;
            }
            self.sim_step()?;
        }
        Ok(())
    }

    /// Hold machine steering `delta_m` for one decision period.
    pub fn decide(&mut self, delta_m: f64) -> Result<Transition, EnvError> {
        if let Some(c) = self.done {
            return Ok(Transition { reward: 0.0, done: true, terminal: Some(c) });
        }
        let dm = self.vehicle.params.delta_max;
        self.u_m = delta_m.clamp(-dm, dm);
        let start = self.log.steps.len();
        let mut conflict = 0.0;
        let mut n = 0usize;
        for _ in 0..self.cfg.agent_period {
            match self.sim_step() {
                Ok(()) => {}
                Err(EnvError::Dynamics(_)) => break,
                Err(e) => return Err(e),
            }
            let r = self.log.steps.last().expect("step recorded");
            conflict += r.gamma_auth * (r.u_m - r.u_d.delta_f).powi(2);
            n += 1;
            if self.done.is_some() {
                break;
            }
        }
        let p = &self.cfg.reward;
        let v_end = self.ctx.v_h;
        let value_safety = safety_reward(v_end, p);
        let safety = match self.opts.method {
            Method::PotentialField => -p.k_pf * potential_risk(&self.vehicle.state, &self.cfg.obstacle),
            _ => value_safety,
        };
        let reward = StepReward {
            safety,
            collaboration: -p.k_co * conflict / n.max(1) as f64,
            smoothness: -p.k_sm * (self.u_m - self.u_m_prev).powi(2),
        };
        self.log.decisions.push(DecisionRecord { step: start, u_m: self.u_m, reward, value_safety, v_end });
        self.u_m_prev = self.u_m;
        let mut total = reward.total();
        if self.done.is_some() {
            total += self.log.terminal_reward;
        }
        let obs_ok = self.done.is_some() || self.observation().iter().all(|v| v.is_finite());
        if !obs_ok {
            return Err(EnvError::NonFinite(self.k as f64 * self.vehicle.params.dt));
        }
        Ok(Transition { reward: total, done: self.done.is_some(), terminal: self.done })
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }
}

/// Run a full episode. `policy` maps an observation to machine steering and
/// is ignored in driver-only mode.
pub fn run_episode(
    cfg: &ScenarioConfig,
    value: &dyn ValueSource,
    opts: EnvOptions,
    seed: u64,
    policy: &mut dyn FnMut(&[f64; OBS_DIM]) -> f64,
) -> Result<EpisodeLog, EnvError> {
    let mut env = Env::new(cfg, value, opts, seed)?;
    run_env(&mut env, policy)?;
    Ok(env.into_log())
}

pub fn run_env(env: &mut Env, policy: &mut dyn FnMut(&[f64; OBS_DIM]) -> f64) -> Result<(), EnvError> {
    env.run_until_decision()?;
    while !env.is_done() {
        let obs = env.observation();
        let a = policy(&obs);
        match env.decide(a) {
            Ok(_) => {}
            Err(EnvError::Dynamics(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Largest per-step deviation between the logged states and a re-simulation
/// driven by the logged blended inputs.
pub fn replay_error(log: &EpisodeLog, cfg: &ScenarioConfig) -> Result<f64, DynamicsError> {
    let mut x = log.spawn;
    let mut w = WheelSpeeds::rolling(&x, 0.0, &cfg.vehicle);
    let mut worst: f64 = 0.0;
    let dist = |a: &VehicleState, b: &VehicleState| {
        a.to_array().iter().zip(b.to_array()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    for rec in &log.steps {
        worst = worst.max(dist(&x, &rec.x));
        let (nx, nw) = vehicle_step(&x, &w, &rec.u_f, &cfg.vehicle, &cfg.tire)?;
        x = nx;
        w = nw;
    }
    Ok(worst.max(dist(&x, &log.final_state)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::ConstraintProxy;
    use crate::vehicle::VehicleState;

    /// Analytic stand-in for a value source: the constraint itself.
    fn setup() -> (ScenarioConfig, ConstraintProxy) {
        let cfg = ScenarioConfig::canonical();
        let src = ConstraintProxy::new(&cfg);
        (cfg, src)
    }

    #[test]
    fn timestamps_and_blend_consistency() {
        let (cfg, src) = setup();
        let log = run_episode(&cfg, &src, EnvOptions::evaluation(Method::Proposed, Mode::Shared), 3, &mut |o| {
            0.1 * o[7].sin()
        })
        .unwrap();
        assert!(!log.steps.is_empty());
        for w in log.steps.windows(2) {
            assert!(w[1].t > w[0].t);
            assert!((w[1].t - w[0].t - cfg.vehicle.dt).abs() < 1e-12);
        }
        for s in &log.steps {
            let want = s.gamma_auth * s.u_m + (1.0 - s.gamma_auth) * s.u_d.delta_f;
            if s.detected {
                assert!((s.u_f.delta_f - want).abs() <= 1e-12);
            }
            assert_eq!(s.u_f.torque_rear, s.u_d.torque_rear);
        }
    }

    #[test]
    fn replay_is_exact() {
        let (cfg, src) = setup();
        for mode in [Mode::DriverOnly, Mode::Shared] {
            let log = run_episode(&cfg, &src, EnvOptions::evaluation(Method::PlainSac, mode), 11, &mut |o| -0.2 * o[14].signum())
                .unwrap();
            assert!(replay_error(&log, &cfg).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn seeded_episodes_repeat() {
        let (mut cfg, src) = setup();
        cfg.spawn_jitter.y = 0.5;
        let opts = EnvOptions::training(Method::Proposed);
        let a = run_episode(&cfg, &src, opts, 5, &mut |_| 0.05).unwrap();
        let b = run_episode(&cfg, &src, opts, 5, &mut |_| 0.05).unwrap();
        assert_eq!(a, b);
        let c = run_episode(&cfg, &src, opts, 6, &mut |_| 0.05).unwrap();
        assert_ne!(a.spawn, c.spawn);
    }

    #[test]
    fn reward_decomposition_sums() {
        let (cfg, src) = setup();
        let mut env = Env::new(&cfg, &src, EnvOptions::training(Method::Proposed), 1).unwrap();
        env.run_until_decision().unwrap();
        let mut total = 0.0;
        while !env.is_done() {
            total += env.decide(0.02).unwrap().reward;
        }
        let log = env.into_log();
        assert!((log.total_reward() - total).abs() < 1e-9);
        let direct: f64 = log.decisions.iter().map(|d| d.reward.safety + d.reward.collaboration + d.reward.smoothness).sum();
        assert_eq!(log.total_reward(), direct + log.terminal_reward);
        assert_eq!(log.common_return(&cfg), log.total_reward());
    }

    #[test]
    fn rejects_spawn_inside_obstacle() {
        let (mut cfg, src) = setup();
        cfg.spawn = VehicleState { x: 23.0, vx: 5.0, ..Default::default() };
        assert!(matches!(Env::new(&cfg, &src, EnvOptions::training(Method::Proposed), 0), Err(EnvError::Rejected(_))));
    }
}
