//! Fixed-point value iteration on a uniform `(X, Y, phi, v)` grid.
//!
//! Within one `(phi, v)` plane every action moves all cells by the same
//! `(dX, dY)` and lands on the same `(phi', v')`, so a backup is a blend of at
//! most four source planes followed by one fractional shift. Planes update
//! independently (synchronous Jacobi sweep).
//!
//! # Binary layout
//!
//! ```text
//! magic    8 bytes  "CARSGRID"
//! version  u32 LE
//! meta     u64 LE length + UTF-8 JSON {dynamics, field}
//! axes     4 x (min f64, step f64, n u64) in storage order v, phi, Y, X
//! gamma    f64 (1.0 for the undiscounted backup)
//! residual f64
//! sweeps   u64
//! values   n_v * n_phi * n_Y * n_X f64, row-major over (v, phi, Y, X)
//! ```

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::reduced::{Reduced, ReducedAction, ReducedDynamics};
use super::{bellman_backup, ReachError};
use crate::geometry::SafetyField;
use crate::par::{self, ExecMode};

const MAGIC: &[u8; 8] = b"CARSGRID";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub step: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        assert!(n >= 2 && max > min);
        Self { min, step: (max - min) / (n - 1) as f64, n }
    }

    pub fn max(&self) -> f64 {
        self.min + self.step * (self.n - 1) as f64
    }

    pub fn value(&self, i: usize) -> f64 {
        self.min + self.step * i as f64
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max())
    }

    /// Lower cell index and fractional weight of `x`, clamped into the axis.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let t = (self.clamp(x) - self.min) / self.step;
        let i = (t.floor() as usize).min(self.n - 2);
        (i, (t - i as f64).clamp(0.0, 1.0))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: GridAxis,
    pub y: GridAxis,
    pub phi: GridAxis,
    pub v: GridAxis,
}

impl Default for GridSpec {
    fn default() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        Self {
            x: GridAxis::new(-5.0, 55.0, 121),
            y: GridAxis::new(-15.0, 15.0, 61),
            phi: GridAxis::new(-half_pi, half_pi, 37),
            v: GridAxis::new(0.0, 15.0, 16),
        }
    }
}

impl GridSpec {
    /// A quick low-resolution grid for tests and previews.
    pub fn coarse() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        Self {
            x: GridAxis::new(-5.0, 55.0, 61),
            y: GridAxis::new(-15.0, 15.0, 31),
            phi: GridAxis::new(-half_pi, half_pi, 19),
            v: GridAxis::new(0.0, 15.0, 11),
        }
    }

    pub fn len(&self) -> usize {
        self.x.n * self.y.n * self.phi.n * self.v.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.x.n * self.y.n
    }

    pub fn index(&self, ix: usize, iy: usize, iphi: usize, iv: usize) -> usize {
        ((iv * self.phi.n + iphi) * self.y.n + iy) * self.x.n + ix
    }

    pub fn cell(&self, ix: usize, iy: usize, iphi: usize, iv: usize) -> Reduced {
        [self.x.value(ix), self.y.value(iy), self.phi.value(iphi), self.v.value(iv)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backup {
    Discounted(f64),
    /// `V = max(h, min_u V')`, the limit of the discounted backup as γ → 1.
    Undiscounted,
}

impl Backup {
    pub fn gamma(&self) -> f64 {
        match self {
            Backup::Discounted(g) => *g,
            Backup::Undiscounted => 1.0,
        }
    }

    #[inline]
    fn apply(&self, h: f64, v_next: f64) -> f64 {
        match *self {
            Backup::Discounted(g) => bellman_backup(h, v_next, g),
            Backup::Undiscounted => h.max(v_next),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub backup: Backup,
    pub tol: f64,
    pub max_sweeps: usize,
    pub mode: ExecMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { backup: Backup::Discounted(0.999), tol: 1e-7, max_sweeps: 5000, mode: ExecMode::Parallel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub spec: GridSpec,
    pub dynamics: ReducedDynamics,
    pub field: SafetyField,
    pub gamma: f64,
    pub residual: f64,
    pub sweeps: usize,
    /// Max-norm change of every sweep, in order.
    pub residual_history: Vec<f64>,
    pub values: Vec<f64>,
}

struct Sweeper<'a> {
    spec: &'a GridSpec,
    dynamics: &'a ReducedDynamics,
    field: &'a SafetyField,
    actions: Vec<ReducedAction>,
    h_plane: Vec<f64>,
    backup: Backup,
}

impl<'a> Sweeper<'a> {
    fn new(spec: &'a GridSpec, dynamics: &'a ReducedDynamics, field: &'a SafetyField, backup: Backup) -> Self {
        let mut h_plane = Vec::with_capacity(spec.plane_len());
        for iy in 0..spec.y.n {
            for ix in 0..spec.x.n {
                h_plane.push(field.h(spec.x.value(ix), spec.y.value(iy)));
            }
        }
        Self { spec, dynamics, field, actions: dynamics.actions(), h_plane, backup }
    }

    fn initial(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.spec.len());
        for _ in 0..self.spec.phi.n * self.spec.v.n {
            v.extend_from_slice(&self.h_plane);
        }
        v
    }

    fn plane<'v>(&self, values: &'v [f64], iphi: usize, iv: usize) -> &'v [f64] {
        let n = self.spec.plane_len();
        let p = iv * self.spec.phi.n + iphi;
        &values[p * n..(p + 1) * n]
    }

    /// Successor values of every cell of plane `(iphi, iv)` under action `a`,
    /// written into `out`. `mixed` is scratch space of one plane.
    fn successor_plane(&self, old: &[f64], iphi: usize, iv: usize, a: ReducedAction, mixed: &mut [f64], out: &mut [f64]) {
        let s = self.spec;
        let (dx, dy, dphi, v_next) = self.dynamics.increment(s.phi.value(iphi), s.v.value(iv), a);
        let (j0, wj) = s.phi.locate(s.phi.value(iphi) + dphi);
        let (k0, wk) = s.v.locate(v_next);

        mixed.fill(0.0);
        for (dj, wjj) in [(0, 1.0 - wj), (1, wj)] {
            for (dk, wkk) in [(0, 1.0 - wk), (1, wk)] {
                let w = wjj * wkk;
                if w <= 1e-15 {
                    continue;
                }
                for (m, src) in mixed.iter_mut().zip(self.plane(old, j0 + dj, k0 + dk)) {
                    *m += w * src;
                }
            }
        }

        let nx = s.x.n;
        let ny = s.y.n;
        let sx = dx / s.x.step;
        let sy = dy / s.y.step;
        let ox = sx.floor();
        let fx = sx - ox;
        let ox = ox as isize;
        for iy in 0..ny {
            let ty = iy as f64 + sy;
            let row = &mut out[iy * nx..(iy + 1) * nx];
            if ty < 0.0 || ty > (ny - 1) as f64 {
                let y_exit = s.y.clamp(s.y.value(iy) + dy);
                for (ix, o) in row.iter_mut().enumerate() {
                    *o = self.field.h(s.x.clamp(s.x.value(ix) + dx), y_exit);
                }
                continue;
            }
            let y0 = (ty.floor() as usize).min(ny - 2);
            let fy = ty - y0 as f64;
            let r0 = &mixed[y0 * nx..(y0 + 1) * nx];
            let r1 = &mixed[(y0 + 1) * nx..(y0 + 2) * nx];
            for (ix, o) in row.iter_mut().enumerate() {
                let x0 = ix as isize + ox;
                if x0 >= 0 && x0 <= nx as isize - 2 {
                    let x0 = x0 as usize;
                    let a0 = r0[x0] + fx * (r0[x0 + 1] - r0[x0]);
                    let a1 = r1[x0] + fx * (r1[x0 + 1] - r1[x0]);
                    *o = a0 + fy * (a1 - a0);
                } else if x0 == nx as isize - 1 && fx == 0.0 {
                    let a0 = r0[nx - 1];
                    *o = a0 + fy * (r1[nx - 1] - a0);
                } else {
                    let y = s.y.value(iy) + dy;
                    *o = self.field.h(s.x.clamp(s.x.value(ix) + dx), s.y.clamp(y));
                }
            }
        }
    }

    /// One synchronous backup of plane `p` into `new_plane`; returns the
    /// largest absolute change.
    fn backup_plane(&self, old: &[f64], p: usize, new_plane: &mut [f64]) -> f64 {
        let s = self.spec;
        let iphi = p % s.phi.n;
        let iv = p / s.phi.n;
        let n = s.plane_len();
        let mut best = vec![f64::INFINITY; n];
        let mut mixed = vec![0.0; n];
        let mut succ = vec![0.0; n];
        for &a in &self.actions {
            self.successor_plane(old, iphi, iv, a, &mut mixed, &mut succ);
            for (b, v) in best.iter_mut().zip(&succ) {
                if *v < *b {
                    *b = *v;
                }
            }
        }
        let old_plane = self.plane(old, iphi, iv);
        let mut res: f64 = 0.0;
        for c in 0..n {
            let v = self.backup.apply(self.h_plane[c], best[c]);
            res = res.max((v - old_plane[c]).abs());
            new_plane[c] = v;
        }
        res
    }

    fn sweep(&self, old: &[f64], new: &mut [f64], mode: ExecMode) -> f64 {
        let n = self.spec.plane_len();
        par::map_chunks_mut(mode, new, n, |p, plane| self.backup_plane(old, p, plane)).into_iter().fold(0.0, f64::max)
    }
}

/// Iterate the backup from `V = h` until the sweep residual drops below
/// `opts.tol`.
pub fn solve_grid(
    dynamics: &ReducedDynamics,
    field: &SafetyField,
    spec: &GridSpec,
    opts: &SolveOptions,
) -> Result<ValueGrid, ReachError> {
    if let Backup::Discounted(g) = opts.backup {
        if !(0.9..1.0).contains(&g) {
            return Err(ReachError::Invalid(format!("discount must lie in [0.9, 1), got {g}")));
        }
    }
    let start = Instant::now();
    let sweeper = Sweeper::new(spec, dynamics, field, opts.backup);
    let mut old = sweeper.initial();
    let mut new = vec![0.0; old.len()];
    let mut history = Vec::new();
    loop {
        let r = sweeper.sweep(&old, &mut new, opts.mode);
        std::mem::swap(&mut old, &mut new);
        history.push(r);
        log::debug!("sweep {} residual {:.3e}", history.len(), r);
        if r < opts.tol {
            break;
        }
        if history.len() >= opts.max_sweeps {
            return Err(ReachError::NotConverged { sweeps: history.len(), residual: r, history });
        }
    }
    log::info!(
        "grid converged: {} sweeps, residual {:.2e}, {:.1} s",
        history.len(),
        history.last().copied().unwrap_or(0.0),
        start.elapsed().as_secs_f64()
    );
    Ok(ValueGrid {
        spec: *spec,
        dynamics: dynamics.clone(),
        field: *field,
        gamma: opts.backup.gamma(),
        residual: *history.last().unwrap_or(&0.0),
        sweeps: history.len(),
        residual_history: history,
        values: old,
    })
}

impl ValueGrid {
    fn backup_rule(&self) -> Backup {
        if self.gamma >= 1.0 {
            Backup::Undiscounted
        } else {
            Backup::Discounted(self.gamma)
        }
    }

    pub fn get(&self, ix: usize, iy: usize, iphi: usize, iv: usize) -> f64 {
        self.values[self.spec.index(ix, iy, iphi, iv)]
    }

    /// Max-norm distance between the stored values and one more backup.
    pub fn fixed_point_residual(&self, mode: ExecMode) -> f64 {
        let sweeper = Sweeper::new(&self.spec, &self.dynamics, &self.field, self.backup_rule());
        let mut next = vec![0.0; self.values.len()];
        sweeper.sweep(&self.values, &mut next, mode)
    }

    /// Quadrilinear interpolation. Positions off the grid take `h` at the
    /// clamped position, matching the exit rule of the solver.
    pub fn value(&self, s: &Reduced) -> f64 {
        let sp = &self.spec;
        if !sp.x.contains(s[0]) || !sp.y.contains(s[1]) {
            return self.field.h(sp.x.clamp(s[0]), sp.y.clamp(s[1]));
        }
        let (ix, fx) = sp.x.locate(s[0]);
        let (iy, fy) = sp.y.locate(s[1]);
        let (ip, fp) = sp.phi.locate(s[2]);
        let (iv, fv) = sp.v.locate(s[3]);
        let mut acc = 0.0;
        for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
            for (dp, wp) in [(0, 1.0 - fp), (1, fp)] {
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let w = wv * wp * wy;
                    if w == 0.0 {
                        continue;
                    }
                    let base = sp.index(ix, iy + dy, ip + dp, iv + dv);
                    acc += w * (self.values[base] + fx * (self.values[base + 1] - self.values[base]));
                }
            }
        }
        acc
    }

    /// Action value of a discrete action through one model step.
    pub fn q_value(&self, s: &Reduced, a: ReducedAction) -> f64 {
        let h = self.field.h(s[0], s[1]);
        self.backup_rule().apply(h, self.value(&self.dynamics.step(s, a)))
    }

    /// Minimising discrete action and its value.
    pub fn greedy(&self, s: &Reduced) -> (ReducedAction, f64) {
        let mut best = (self.dynamics.actions()[0], f64::INFINITY);
        for a in self.dynamics.actions() {
            let q = self.q_value(s, a);
            if q < best.1 {
                best = (a, q);
            }
        }
        best
    }

    /// Largest `h` met when following the greedy policy for `steps` steps.
    pub fn greedy_rollout_max_h(&self, s: &Reduced, steps: usize) -> f64 {
        let mut x = *s;
        let mut worst = self.field.h(x[0], x[1]);
        for _ in 0..steps {
            let (a, _) = self.greedy(&x);
            x = self.dynamics.step(&x, a);
            worst = worst.max(self.field.h(x[0], x[1]));
        }
        worst
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ReachError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::json!({ "dynamics": self.dynamics, "field": self.field });
        let meta = serde_json::to_vec(&meta).map_err(|e| ReachError::Format(e.to_string()))?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for axis in [self.spec.v, self.spec.phi, self.spec.y, self.spec.x] {
            w.write_all(&axis.min.to_le_bytes())?;
            w.write_all(&axis.step.to_le_bytes())?;
            w.write_all(&(axis.n as u64).to_le_bytes())?;
        }
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&self.residual.to_le_bytes())?;
        w.write_all(&(self.sweeps as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ReachError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReachError::Format("not a value grid file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ReachError::Format(format!("unsupported grid version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        #[derive(Deserialize)]
        struct Meta {
            dynamics: ReducedDynamics,
            field: SafetyField,
        }
        let meta: Meta = serde_json::from_slice(&meta).map_err(|e| ReachError::Format(e.to_string()))?;
        let mut axes = [GridAxis { min: 0.0, step: 0.0, n: 0 }; 4];
        for a in axes.iter_mut() {
            *a = GridAxis { min: read_f64(&mut r)?, step: read_f64(&mut r)?, n: read_u64(&mut r)? as usize };
            if a.n < 2 || !(a.step > 0.0) {
                return Err(ReachError::Format(format!("bad axis {a:?}")));
            }
        }
        let spec = GridSpec { v: axes[0], phi: axes[1], y: axes[2], x: axes[3] };
        let gamma = read_f64(&mut r)?;
        let residual = read_f64(&mut r)?;
        let sweeps = read_u64(&mut r)? as usize;
        let mut raw = vec![0u8; spec.len() * 8];
        r.read_exact(&mut raw)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReachError::Format("non-finite grid value".into()));
        }
        Ok(Self {
            spec,
            dynamics: meta.dynamics,
            field: meta.field,
            gamma,
            residual,
            sweeps,
            residual_history: Vec::new(),
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReachError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, ReachError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Obstacle;

    fn tiny_spec() -> GridSpec {
        let half_pi = std::f64::consts::FRAC_PI_2;
        GridSpec {
            x: GridAxis::new(-5.0, 55.0, 31),
            y: GridAxis::new(-15.0, 15.0, 16),
            phi: GridAxis::new(-half_pi, half_pi, 7),
            v: GridAxis::new(0.0, 15.0, 6),
        }
    }

    #[test]
    fn axis_locate_clamps() {
        let a = GridAxis::new(0.0, 10.0, 11);
        assert_eq!(a.locate(-3.0), (0, 0.0));
        assert_eq!(a.locate(10.0), (9, 1.0));
        let (i, f) = a.locate(3.25);
        assert_eq!(i, 3);
        assert!((f - 0.25).abs() < 1e-12);
    }

    #[test]
    fn value_interpolation_reproduces_cells() {
        let field = SafetyField::new(Obstacle::canonical_ellipse());
        let spec = tiny_spec();
        let opts = SolveOptions { backup: Backup::Discounted(0.95), tol: 1e-9, ..Default::default() };
        let g = solve_grid(&ReducedDynamics::default(), &field, &spec, &opts).unwrap();
        for &(ix, iy, ip, iv) in &[(0, 0, 0, 0), (30, 15, 6, 5), (12, 7, 3, 2)] {
            assert_eq!(g.value(&spec.cell(ix, iy, ip, iv)), g.get(ix, iy, ip, iv));
        }
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let field = SafetyField::new(Obstacle::canonical_circle());
        let opts = SolveOptions { backup: Backup::Discounted(0.95), tol: 1e-6, ..Default::default() };
        let g = solve_grid(&ReducedDynamics::default(), &field, &tiny_spec(), &opts).unwrap();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let back = ValueGrid::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.values, g.values);
        assert_eq!(back.spec, g.spec);
        assert_eq!(back.gamma, g.gamma);
        assert!(ValueGrid::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn sequential_and_parallel_sweeps_agree() {
        let field = SafetyField::new(Obstacle::canonical_t_shape());
        let base = SolveOptions { backup: Backup::Discounted(0.99), tol: 1e-5, ..Default::default() };
        let seq = SolveOptions { mode: ExecMode::Sequential, ..base };
        let a = solve_grid(&ReducedDynamics::default(), &field, &tiny_spec(), &base).unwrap();
        let b = solve_grid(&ReducedDynamics::default(), &field, &tiny_spec(), &seq).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.residual_history, b.residual_history);
    }

    #[test]
    fn rejects_out_of_range_discount() {
        let field = SafetyField::new(Obstacle::canonical_circle());
        let opts = SolveOptions { backup: Backup::Discounted(0.5), ..Default::default() };
        assert!(solve_grid(&ReducedDynamics::default(), &field, &tiny_spec(), &opts).is_err());
    }
}
