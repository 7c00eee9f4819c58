//! Fitted `V_h` and `Q_h` networks trained offline on transitions.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TransitionDataset;
use super::{bellman_backup, expectile_weight, ReachError};
use crate::nn::{read_u32, read_u64, Adam, AdamConfig, Mlp, Normalizer};
use crate::value::ValueSource;
use crate::vehicle::{ControlInput, VehicleState};

const MAGIC: &[u8; 8] = b"CARSVAPX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Polyak rate of the target value network.
    pub target_rate: f64,
    /// Fraction of episodes held out for the residual check.
    pub val_fraction: f64,
    /// Held-out RMS Bellman residual regarded as converged.
    pub residual_threshold: f64,
    /// Consecutive epochs of rising residual treated as divergence.
    pub patience: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            lr: 1e-3,
            batch: 256,
            epochs: 30,
            gamma: 0.999,
            tau: 0.1,
            target_rate: 0.01,
            val_fraction: 0.1,
            residual_threshold: 0.25,
            patience: 6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), ReachError> {
        let ok = !self.hidden.is_empty()
            && self.hidden.iter().all(|&h| h > 0)
            && self.lr > 0.0
            && self.batch > 0
            && (0.0..1.0).contains(&self.gamma)
            && self.tau > 0.0
            && self.tau < 1.0
            && self.target_rate > 0.0
            && self.target_rate <= 1.0
            && (0.0..1.0).contains(&self.val_fraction);
        if ok {
            Ok(())
        } else {
            Err(ReachError::Invalid(format!("bad fit configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub train_q_loss: Vec<f64>,
    pub train_v_loss: Vec<f64>,
    /// Held-out RMS of `Q(x, u) - target(x, u)` per epoch.
    pub val_residual: Vec<f64>,
    pub converged: bool,
    pub train_transitions: usize,
    pub val_transitions: usize,
}

/// Region the approximator was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDomain {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub v_max: f64,
}

impl FitDomain {
    pub fn contains(&self, s: &VehicleState) -> bool {
        s.x >= self.x[0] && s.x <= self.x[1] && s.y >= self.y[0] && s.y <= self.y[1] && s.speed() <= self.v_max
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    domain: FitDomain,
    gamma: f64,
    tau: f64,
    out_mean: f64,
    out_std: f64,
    config: FitConfig,
    report: FitReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueApproximator {
    pub v_net: Mlp,
    pub q_net: Mlp,
    pub norm_x: Normalizer,
    pub norm_xu: Normalizer,
    pub out_mean: f64,
    pub out_std: f64,
    pub domain: FitDomain,
    pub gamma: f64,
    pub tau: f64,
    pub config: FitConfig,
    pub report: FitReport,
}

fn xu_row(x: &[f64; 6], u: &[f64; 2]) -> [f64; 8] {
    [x[0], x[1], x[2], x[3], x[4], x[5], u[0], u[1]]
}

impl ValueApproximator {
    pub fn query_v(&self, x: &VehicleState) -> (f64, bool) {
        let mut a = x.to_array();
        self.norm_x.apply(&mut a);
        (self.out_mean + self.out_std * self.v_net.forward_one(&a)[0], !self.domain.contains(x))
    }

    pub fn query_q(&self, x: &VehicleState, u: &ControlInput) -> (f64, bool) {
        let mut a = xu_row(&x.to_array(), &[u.delta_f, u.torque_rear]);
        self.norm_xu.apply(&mut a);
        (self.out_mean + self.out_std * self.q_net.forward_one(&a)[0], !self.domain.contains(x))
    }

    /// Batched `V` for many states.
    pub fn v_batch(&self, xs: &[VehicleState]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let mut m = Array2::zeros((xs.len(), 6));
        for (i, s) in xs.iter().enumerate() {
            let mut a = s.to_array();
            self.norm_x.apply(&mut a);
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&a[..]));
        }
        self.v_net.forward(m.view()).iter().map(|v| self.out_mean + self.out_std * v).collect()
    }

    pub fn write_to(&self, w: impl Write) -> Result<(), ReachError> {
        let mut w = BufWriter::new(w);
        let meta = Meta {
            domain: self.domain,
            gamma: self.gamma,
            tau: self.tau,
            out_mean: self.out_mean,
            out_std: self.out_std,
            config: self.config.clone(),
            report: self.report.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| ReachError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        // The scalars are repeated in binary so that reloading is bit-exact.
        for v in [self.out_mean, self.out_std, self.gamma, self.tau] {
            w.write_all(&v.to_le_bytes())?;
        }
        self.norm_x.write_to(&mut w)?;
        self.norm_xu.write_to(&mut w)?;
        self.v_net.write_to(&mut w)?;
        self.q_net.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, ReachError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReachError::Format("not a value approximator file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ReachError::Format(format!("unsupported approximator version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        if n > 1 << 24 {
            return Err(ReachError::Format("metadata too large".into()));
        }
        let mut json = vec![0u8; n];
        r.read_exact(&mut json)?;
        let meta: Meta = serde_json::from_slice(&json).map_err(|e| ReachError::Format(e.to_string()))?;
        let mut s = [0.0; 4];
        for v in s.iter_mut() {
            *v = super::grid::read_f64(&mut r)?;
        }
        let norm_x = Normalizer::read_from(&mut r)?;
        let norm_xu = Normalizer::read_from(&mut r)?;
        let v_net = Mlp::read_from(&mut r)?;
        let q_net = Mlp::read_from(&mut r)?;
        if norm_x.dim() != 6 || norm_xu.dim() != 8 || v_net.input_dim() != 6 || q_net.input_dim() != 8 {
            return Err(ReachError::Format("network shapes do not match the state layout".into()));
        }
        Ok(Self {
            v_net,
            q_net,
            norm_x,
            norm_xu,
            out_mean: s[0],
            out_std: s[1],
            domain: meta.domain,
            gamma: s[2],
            tau: s[3],
            config: meta.config,
            report: meta.report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReachError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ReachError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

impl ValueSource for ValueApproximator {
    fn v(&self, x: &VehicleState) -> f64 {
        self.query_v(x).0
    }

    fn q(&self, x: &VehicleState, u: &ControlInput) -> f64 {
        self.query_q(x, u).0
    }

    fn out_of_domain(&self, x: &VehicleState) -> bool {
        !self.domain.contains(x)
    }
}

fn rows<const N: usize>(items: impl Iterator<Item = [f64; N]>, n: usize, norm: &Normalizer) -> Array2<f64> {
    let mut m = Array2::zeros((n, N));
    for (i, mut r) in items.enumerate() {
        norm.apply(&mut r);
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
    }
    m
}

/// Alternate Q regression onto `(1 - γ) h + γ max(h, V̄(x'))` and expectile
/// regression of V onto Q, with a Polyak-averaged target `V̄`.
pub fn fit_value_functions(data: &TransitionDataset, domain: FitDomain, cfg: &FitConfig) -> Result<ValueApproximator, ReachError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ReachError::Invalid("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all = &data.transitions;

    let mut episodes: Vec<u32> = all.iter().map(|t| t.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    let n_val_eps = ((episodes.len() as f64) * cfg.val_fraction).round() as usize;
    let mut shuffled = episodes.clone();
    shuffled.shuffle(&mut rng);
    let val_eps: std::collections::HashSet<u32> = shuffled[..n_val_eps.min(shuffled.len().saturating_sub(1))].iter().copied().collect();
    let (val, train): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|&i| val_eps.contains(&all[i].episode));

    let xs = Array2::from_shape_fn((train.len(), 6), |(i, j)| all[train[i]].x[j]);
    let xus = Array2::from_shape_fn((train.len(), 8), |(i, j)| xu_row(&all[train[i]].x, &all[train[i]].u)[j]);
    let norm_x = Normalizer::fit(xs.view());
    let norm_xu = Normalizer::fit(xus.view());
    let hs: Vec<f64> = train.iter().map(|&i| all[i].h).collect();
    let out_mean = hs.iter().sum::<f64>() / hs.len() as f64;
    let out_std = (hs.iter().map(|h| (h - out_mean).powi(2)).sum::<f64>() / hs.len() as f64).sqrt().max(1e-6);

    let mut sizes_v = vec![6];
    sizes_v.extend(&cfg.hidden);
    sizes_v.push(1);
    let mut sizes_q = vec![8];
    sizes_q.extend(&cfg.hidden);
    sizes_q.push(1);
    let mut v_net = Mlp::new(&sizes_v, &mut rng);
    let mut q_net = Mlp::new(&sizes_q, &mut rng);
    let mut v_target = v_net.clone();
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut opt_v = Adam::new(adam, &v_net);
    let mut opt_q = Adam::new(adam, &q_net);

    let g = cfg.gamma;
    let target_of = |h: f64, v_next: f64| bellman_backup(h, v_next, g);
    let denorm = |y: f64| out_mean + out_std * y;
    let norm = |y: f64| (y - out_mean) / out_std;

    let mut report = FitReport { train_transitions: train.len(), val_transitions: val.len(), ..FitReport::default() };
    let mut order = train.clone();
    let mut rising = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut q_loss, mut v_loss, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let bx = rows(chunk.iter().map(|&i| all[i].x), b, &norm_x);
            let bxu = rows(chunk.iter().map(|&i| xu_row(&all[i].x, &all[i].u)), b, &norm_xu);
            let bxn = rows(chunk.iter().map(|&i| all[i].x_next), b, &norm_x);
            let vn = v_target.forward(bxn.view());
            let targets: Vec<f64> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let t = &all[i];
                    let v_next = if t.terminal { t.h_next } else { denorm(vn[[k, 0]]) };
                    norm(target_of(t.h, v_next))
                })
                .collect();

            let qc = q_net.forward_cached(bxu.view());
            let q = qc.output().column(0).to_owned();
            let mut gq = Array2::zeros((b, 1));
            for k in 0..b {
                let e = q[k] - targets[k];
                q_loss += e * e / b as f64;
                gq[[k, 0]] = 2.0 * e / b as f64;
            }
            let (grads_q, _) = q_net.backward(&qc, gq.view());
            opt_q.step(&mut q_net, &grads_q);

            let vc = v_net.forward_cached(bx.view());
            let mut gv = Array2::zeros((b, 1));
            for k in 0..b {
                let eps = q[k] - vc.output()[[k, 0]];
                let w = expectile_weight(eps, cfg.tau);
                v_loss += w * eps * eps / b as f64;
                gv[[k, 0]] = -2.0 * w * eps / b as f64;
            }
            let (grads_v, _) = v_net.backward(&vc, gv.view());
            opt_v.step(&mut v_net, &grads_v);
            v_target.polyak_from(&v_net, cfg.target_rate);
            batches += 1;
        }
        if !q_loss.is_finite() || !v_loss.is_finite() {
            return Err(ReachError::Diverged(format!("non-finite loss after {} epochs", report.epochs)));
        }
        report.train_q_loss.push(q_loss / batches as f64);
        report.train_v_loss.push(v_loss / batches as f64);
        let res = held_out_residual(&v_net, &q_net, &norm_x, &norm_xu, all, &val, g, out_mean, out_std);
        if let Some(&prev) = report.val_residual.last() {
            rising = if res > prev { rising + 1 } else { 0 };
        }
        report.val_residual.push(res);
        report.epochs += 1;
        log::debug!("fit epoch {}: q {:.4e} v {:.4e} residual {:.4}", report.epochs, q_loss / batches as f64, v_loss / batches as f64, res);
        if cfg.patience > 0 && rising >= cfg.patience {
            return Err(ReachError::Diverged(format!(
                "held-out residual rose for {rising} consecutive epochs: {:?}",
                report.val_residual
            )));
        }
    }
    report.converged = report.val_residual.last().is_some_and(|&r| r < cfg.residual_threshold);
    Ok(ValueApproximator {
        v_net,
        q_net,
        norm_x,
        norm_xu,
        out_mean,
        out_std,
        domain,
        gamma: cfg.gamma,
        tau: cfg.tau,
        config: cfg.clone(),
        report,
    })
}

#[allow(clippy::too_many_arguments)]
fn held_out_residual(
    v_net: &Mlp,
    q_net: &Mlp,
    norm_x: &Normalizer,
    norm_xu: &Normalizer,
    all: &[super::dataset::Transition],
    val: &[usize],
    gamma: f64,
    out_mean: f64,
    out_std: f64,
) -> f64 {
    if val.is_empty() {
        return f64::NAN;
    }
    let n = val.len();
    let bxu = rows(val.iter().map(|&i| xu_row(&all[i].x, &all[i].u)), n, norm_xu);
    let bxn = rows(val.iter().map(|&i| all[i].x_next), n, norm_x);
    let q = q_net.forward(bxu.view());
    let vn = v_net.forward(bxn.view());
    let mut acc = 0.0;
    for (k, &i) in val.iter().enumerate() {
        let t = &all[i];
        let v_next = if t.terminal { t.h_next } else { out_mean + out_std * vn[[k, 0]] };
        let e = out_mean + out_std * q[[k, 0]] - bellman_backup(t.h, v_next, gamma);
        acc += e * e;
    }
    (acc / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reach::dataset::{Provenance, Transition};

    /// Straight-line coasting far from anything: `h` is the distance-like
    /// field `-1 - x/10`, every successor is a plain step forward.
    fn straight_line() -> TransitionDataset {
        let mut transitions = Vec::new();
        for ep in 0..40u32 {
            let y = ep as f64 * 0.25 - 5.0;
            for k in 0..30 {
                let x = k as f64;
                let h = |x: f64| -1.0 - x / 10.0 - y.abs() / 10.0;
                transitions.push(Transition {
                    x: [x, y, 0.0, 10.0, 0.0, 0.0],
                    wheels: [0.0; 4],
                    u: [0.0, 0.0],
                    x_next: [x + 1.0, y, 0.0, 10.0, 0.0, 0.0],
                    h: h(x),
                    h_next: h(x + 1.0),
                    terminal: k == 29,
                    substeps: 10,
                    episode: ep,
                    provenance: Provenance::Driver,
                });
            }
        }
        TransitionDataset { transitions, episodes: 40, collision_episodes: 0 }
    }

    fn small_cfg() -> FitConfig {
        FitConfig { hidden: vec![16, 16], epochs: 40, batch: 64, lr: 3e-3, patience: 0, ..FitConfig::default() }
    }

    #[test]
    fn obstacle_free_line_is_safe_everywhere() {
        let data = straight_line();
        let dom = FitDomain { x: [-1.0, 31.0], y: [-6.0, 6.0], v_max: 15.0 };
        let fit = fit_value_functions(&data, dom, &small_cfg()).unwrap();
        for t in &data.transitions {
            assert!(fit.query_v(&t.state()).0 < 0.0);
        }
        let (v1, f1) = fit.query_v(&data.transitions[3].state());
        let (v2, _) = fit.query_v(&data.transitions[3].state());
        assert_eq!(v1, v2);
        assert!(!f1);
        assert!(fit.query_v(&VehicleState { x: 100.0, ..Default::default() }).1);
    }

    #[test]
    fn reload_is_bit_exact() {
        let data = straight_line();
        let dom = FitDomain { x: [-1.0, 31.0], y: [-6.0, 6.0], v_max: 15.0 };
        let fit = fit_value_functions(&data, dom, &FitConfig { epochs: 2, ..small_cfg() }).unwrap();
        let mut buf = Vec::new();
        fit.write_to(&mut buf).unwrap();
        let back = ValueApproximator::read_from(&buf[..]).unwrap();
        assert_eq!(back, fit);
        let s = VehicleState { x: 4.2, y: 0.3, vx: 8.0, ..Default::default() };
        assert_eq!(back.query_v(&s).0.to_bits(), fit.query_v(&s).0.to_bits());
        assert!(ValueApproximator::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn seeded_fit_repeats() {
        let data = straight_line();
        let dom = FitDomain { x: [-1.0, 31.0], y: [-6.0, 6.0], v_max: 15.0 };
        let cfg = FitConfig { epochs: 2, ..small_cfg() };
        assert_eq!(fit_value_functions(&data, dom, &cfg).unwrap(), fit_value_functions(&data, dom, &cfg).unwrap());
    }

    #[test]
    fn rejects_empty_and_bad_config() {
        let dom = FitDomain { x: [0.0, 1.0], y: [0.0, 1.0], v_max: 1.0 };
        assert!(fit_value_functions(&TransitionDataset::default(), dom, &small_cfg()).is_err());
        let bad = FitConfig { tau: 1.5, ..small_cfg() };
        assert!(fit_value_functions(&straight_line(), dom, &bad).is_err());
    }
}
