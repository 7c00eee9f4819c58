//! Simulated transition data for fitting the value approximators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sub_seed;
use crate::driver::{DriverModel, DriverParams, PathLine};
use crate::par::{map_indices, ExecMode};
use crate::reach::{Provenance, Transition, TransitionDataset};
use crate::scenario::ScenarioConfig;
use crate::vehicle::{ControlInput, Vehicle, VehicleState};

/// Maps the constraint value onto the value scale the driver is tuned in,
/// so the canonical detection state reads about -10.
const DRIVER_RISK_GAIN: f64 = 1.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Target share of collision-free episodes.
    pub non_collision_target: f64,
    /// Attempts allowed per requested episode before giving up on the mix.
    pub max_attempt_factor: usize,
    /// Episode length (s).
    pub horizon: f64,
    /// Control steps a sampled input is held for; one transition each.
    pub hold_steps: usize,
    /// Relative weights of driver, random and perturbed-driver episodes.
    pub policy_mix: [f64; 3],
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub heading_max: f64,
    pub speed_range: [f64; 2],
    /// Share of starts drawn in front of the obstacle, heading towards it.
    pub approach_fraction: f64,
    pub torque_range: [f64; 2],
    pub cai_range: [f64; 2],
    pub t_m_range: [f64; 2],
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            seed: 0,
            non_collision_target: 0.65,
            max_attempt_factor: 20,
            horizon: 3.0,
            hold_steps: 10,
            policy_mix: [0.4, 0.3, 0.3],
            x_range: [-10.0, 60.0],
            y_range: [-18.0, 18.0],
            heading_max: 1.3,
            speed_range: [0.5, 15.0],
            approach_fraction: 0.5,
            torque_range: [-1800.0, 1500.0],
            cai_range: [0.2, 0.9],
            t_m_range: [0.3, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenReport {
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
    pub non_collision_fraction: f64,
    pub transitions: usize,
    /// True when the attempt budget ran out before the mix was met.
    pub best_effort: bool,
}

struct Attempt {
    transitions: Vec<Transition>,
    collided: bool,
}

fn sample_spawn(cfg: &DatagenConfig, scen: &ScenarioConfig, rng: &mut ChaCha8Rng) -> VehicleState {
    let field = scen.field();
    let (cx, cy) = scen.obstacle.center();
    loop {
        let s = if rng.random::<f64>() < cfg.approach_fraction {
            let x = rng.random_range(cx - 30.0..cx - 5.0);
            let y = cy + rng.random_range(-8.0..8.0);
            let aim = (cy - y).atan2(cx - x);
            VehicleState {
                x,
                y,
                phi: aim + rng.random_range(-0.5..0.5),
                vx: rng.random_range(5.0..cfg.speed_range[1]),
                ..Default::default()
            }
        } else {
            VehicleState {
                x: rng.random_range(cfg.x_range[0]..cfg.x_range[1]),
                y: rng.random_range(cfg.y_range[0]..cfg.y_range[1]),
                phi: rng.random_range(-cfg.heading_max..cfg.heading_max),
                vx: rng.random_range(cfg.speed_range[0]..cfg.speed_range[1]),
                ..Default::default()
            }
        };
        if field.h_state(&s) < -0.05 && scen.domain.contains(s.x, s.y) {
            return s;
        }
    }
}

fn run_attempt(cfg: &DatagenConfig, scen: &ScenarioConfig, seed: u64, episode: u32) -> Attempt {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spawn = sample_spawn(cfg, scen, &mut rng);
    let w = cfg.policy_mix;
    let pick = rng.random::<f64>() * (w[0] + w[1] + w[2]);
    let provenance = if pick < w[0] {
        Provenance::Driver
    } else if pick < w[0] + w[1] {
        Provenance::Random
    } else {
        Provenance::Perturbation
    };
    let p = scen.vehicle;
    let field = scen.field();
    let cai = rng.random_range(cfg.cai_range[0]..=cfg.cai_range[1]);
    let dparams = DriverParams { t_m: rng.random_range(cfg.t_m_range[0]..=cfg.t_m_range[1]), ..scen.driver };
    let path = PathLine { x: spawn.x, y: spawn.y, phi: spawn.phi };
    let mut driver = DriverModel::new(dparams, path, spawn.vx.max(1.0), p.delta_max, p.torque_max, p.dt, rng.random());
    let steer_noise = Normal::new(0.0, 0.12).expect("valid");
    let torque_noise = Normal::new(0.0, 500.0).expect("valid");
    let mut vehicle = Vehicle::new(spawn, p, scen.tire);
    let macro_steps = (cfg.horizon / (p.dt * cfg.hold_steps as f64)).round() as usize;
    let mut out = Vec::with_capacity(macro_steps);
    let mut collided = false;
    let mut random_u = ControlInput::default();
    let mut random_left = 0usize;
    let mut t = 0.0;
    for _ in 0..macro_steps {
        let x0 = vehicle.state;
        let w0 = vehicle.wheels;
        let h0 = field.h_state(&x0);
        let mut u = ControlInput::default();
        let mut n = 0u16;
        let mut terminal = false;
        for k in 0..cfg.hold_steps {
            let s = vehicle.state;
            let drv = driver.act(&s, &scen.obstacle, DRIVER_RISK_GAIN * field.h_state(&s), cai, true, t).control;
            if k == 0 {
                u = match provenance {
                    Provenance::Driver => drv,
                    Provenance::Random => {
                        if random_left == 0 {
                            random_u = ControlInput::new(
                                rng.random_range(-p.delta_max..=p.delta_max),
                                rng.random_range(cfg.torque_range[0]..=cfg.torque_range[1]),
                            );
                            random_left = rng.random_range(2..=10);
                        }
                        random_left -= 1;
                        random_u
                    }
                    Provenance::Perturbation => ControlInput::new(
                        (drv.delta_f + steer_noise.sample(&mut rng)).clamp(-p.delta_max, p.delta_max),
                        (drv.torque_rear + torque_noise.sample(&mut rng)).clamp(cfg.torque_range[0], cfg.torque_range[1]),
                    ),
                };
            }
            t += p.dt;
            n += 1;
            if vehicle.advance(&u).is_err() {
                terminal = true;
                break;
            }
            let s = vehicle.state;
            if field.h_state(&s) >= 0.0 {
                collided = true;
                terminal = true;
                break;
            }
            if !scen.domain.contains(s.x, s.y) {
                terminal = true;
                break;
            }
        }
        let x1 = vehicle.state;
        if !x1.is_finite() {
            break;
        }
        out.push(Transition {
            x: x0.to_array(),
            wheels: w0.omega,
            u: [u.delta_f, u.torque_rear],
            x_next: x1.to_array(),
            h: h0,
            h_next: field.h_state(&x1),
            terminal,
            substeps: n,
            episode,
            provenance,
        });
        if terminal {
            break;
        }
    }
    Attempt { transitions: out, collided }
}

/// Episodes from the driver model at random insight and delay, random
/// piecewise-constant inputs and perturbed driver inputs. Episodes are
/// accepted in attempt order so that the collision-free share tracks the
/// target; the result does not depend on the thread count.
pub fn generate_dataset(cfg: &DatagenConfig, scen: &ScenarioConfig, mode: ExecMode) -> (TransitionDataset, DatagenReport) {
    let mut data = TransitionDataset::default();
    let max_attempts = cfg.episodes * cfg.max_attempt_factor.max(1);
    let (mut nc, mut coll, mut attempts) = (0usize, 0usize, 0usize);
    let batch = 64;
    while nc + coll < cfg.episodes && attempts < max_attempts {
        let n = batch.min(max_attempts - attempts);
        let base = attempts;
        let results = map_indices(mode, n, |i| run_attempt(cfg, scen, sub_seed(cfg.seed, (base + i) as u64), 0));
        for a in results {
            attempts += 1;
            let acc = nc + coll;
            if acc >= cfg.episodes {
                break;
            }
            let quota_nc = (cfg.non_collision_target * (acc + 1) as f64).ceil() as usize;
            let quota_c = ((1.0 - cfg.non_collision_target) * (acc + 1) as f64).ceil() as usize;
            let take = if a.collided { coll < quota_c } else { nc < quota_nc };
            if !take || a.transitions.is_empty() {
                continue;
            }
            let ep = acc as u32;
            data.transitions.extend(a.transitions.into_iter().map(|t| Transition { episode: ep, ..t }));
            if a.collided {
                coll += 1;
            } else {
                nc += 1;
            }
        }
    }
    data.episodes = (nc + coll) as u32;
    data.collision_episodes = coll as u32;
    let report = DatagenReport {
        requested: cfg.episodes,
        accepted: nc + coll,
        attempts,
        non_collision_fraction: data.non_collision_fraction(),
        transitions: data.len(),
        best_effort: nc + coll < cfg.episodes,
    };
    if report.best_effort {
        log::warn!("dataset mix not met after {attempts} attempts; keeping {} episodes", nc + coll);
    }
    (data, report)
}
