//! Transition records `(x, u, x', h)` used to fit the value approximators.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{read_f64, read_u32, read_u64};
use super::ReachError;
use crate::geometry::SafetyField;
use crate::vehicle::{step, ControlInput, TireParams, VehicleParams, VehicleState, WheelSpeeds};

const MAGIC: &[u8; 8] = b"CARSDATA";
const VERSION: u32 = 1;

/// Behaviour that produced an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Driver,
    Random,
    Perturbation,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Provenance::Driver => 0,
            Provenance::Random => 1,
            Provenance::Perturbation => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Provenance::Driver),
            1 => Some(Provenance::Random),
            2 => Some(Provenance::Perturbation),
            _ => None,
        }
    }
}

/// The control `u` is held for `substeps` dynamics steps from `(x, wheels)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub x: [f64; 6],
    pub wheels: [f64; 4],
    pub u: [f64; 2],
    pub x_next: [f64; 6],
    pub h: f64,
    pub h_next: f64,
    /// Successor left the problem (collision or domain exit): its value is
    /// its constraint value.
    pub terminal: bool,
    pub substeps: u16,
    pub episode: u32,
    pub provenance: Provenance,
}

impl Transition {
    pub fn state(&self) -> VehicleState {
        VehicleState::from_array(self.x)
    }

    pub fn next_state(&self) -> VehicleState {
        VehicleState::from_array(self.x_next)
    }

    pub fn control(&self) -> ControlInput {
        ControlInput::new(self.u[0], self.u[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub episodes: u32,
    pub collision_episodes: u32,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn non_collision_fraction(&self) -> f64 {
        if self.episodes == 0 {
            return 0.0;
        }
        1.0 - self.collision_episodes as f64 / self.episodes as f64
    }

    /// Largest deviation between stored and recomputed successors and
    /// constraint values.
    pub fn consistency_error(&self, field: &SafetyField, p: &VehicleParams, tp: &TireParams) -> Result<f64, ReachError> {
        let mut worst: f64 = 0.0;
        for t in &self.transitions {
            let mut x = t.state();
            let mut w = WheelSpeeds { omega: t.wheels };
            for _ in 0..t.substeps {
                (x, w) = step(&x, &w, &t.control(), p, tp).map_err(|e| ReachError::Invalid(e.to_string()))?;
            }
            for (a, b) in x.to_array().iter().zip(t.x_next) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((field.h_state(&t.state()) - t.h).abs());
            worst = worst.max((field.h_state(&t.next_state()) - t.h_next).abs());
        }
        Ok(worst)
    }

    pub fn write_to(&self, w: impl Write) -> Result<(), ReachError> {
        let mut w = BufWriter::new(w);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.episodes.to_le_bytes())?;
        w.write_all(&self.collision_episodes.to_le_bytes())?;
        w.write_all(&(self.transitions.len() as u64).to_le_bytes())?;
        for t in &self.transitions {
            for v in t.x.iter().chain(&t.wheels).chain(&t.u).chain(&t.x_next).chain([&t.h, &t.h_next]) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[t.terminal as u8, t.provenance.code()])?;
            w.write_all(&t.substeps.to_le_bytes())?;
            w.write_all(&t.episode.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, ReachError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReachError::Format("not a transition dataset".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ReachError::Format(format!("unsupported dataset version {version}")));
        }
        let episodes = read_u32(&mut r)?;
        let collision_episodes = read_u32(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let mut transitions = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let mut f = [0.0; 20];
            for v in f.iter_mut() {
                *v = read_f64(&mut r)?;
            }
            let mut flags = [0u8; 2];
            r.read_exact(&mut flags)?;
            let mut sub = [0u8; 2];
            r.read_exact(&mut sub)?;
            let episode = read_u32(&mut r)?;
            let provenance = Provenance::from_code(flags[1]).ok_or_else(|| ReachError::Format("bad provenance".into()))?;
            transitions.push(Transition {
                x: f[0..6].try_into().unwrap(),
                wheels: f[6..10].try_into().unwrap(),
                u: f[10..12].try_into().unwrap(),
                x_next: f[12..18].try_into().unwrap(),
                h: f[18],
                h_next: f[19],
                terminal: flags[0] != 0,
                substeps: u16::from_le_bytes(sub),
                episode,
                provenance,
            });
        }
        Ok(Self { transitions, episodes, collision_episodes })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReachError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ReachError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TransitionDataset {
        let t = Transition {
            x: [1.0, 2.0, 0.1, 10.0, 0.2, 0.01],
            wheels: [30.0, 30.0, 29.0, 29.5],
            u: [0.05, -200.0],
            x_next: [2.0, 2.1, 0.11, 9.9, 0.2, 0.02],
            h: -3.0,
            h_next: -2.9,
            terminal: true,
            substeps: 10,
            episode: 4,
            provenance: Provenance::Perturbation,
        };
        TransitionDataset { transitions: vec![t, Transition { terminal: false, provenance: Provenance::Driver, ..t }], episodes: 5, collision_episodes: 2 }
    }

    #[test]
    fn binary_roundtrip() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(TransitionDataset::read_from(&buf[..]).unwrap(), d);
        assert!((d.non_collision_fraction() - 0.6).abs() < 1e-12);
        buf[0] = b'X';
        assert!(TransitionDataset::read_from(&buf[..]).is_err());
    }
}
