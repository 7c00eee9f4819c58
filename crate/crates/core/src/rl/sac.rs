//! Soft actor-critic with twin critics, a tanh-squashed Gaussian policy and
//! automatic temperature.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::state::OBS_DIM;
use crate::nn::{Adam, AdamConfig, Grads, Mlp, Normalizer};

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Keeps `log(1 - a²)` finite at the squashing bounds.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub batch: usize,
    pub discount: f64,
    pub polyak: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub init_alpha: f64,
    pub target_entropy: f64,
    pub replay_capacity: usize,
    /// Decisions taken uniformly at random before learning starts.
    pub warmup: usize,
    pub updates_per_decision: usize,
    pub log_std_bounds: [f64; 2],
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            batch: 256,
            discount: 0.99,
            polyak: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            init_alpha: 0.2,
            target_entropy: -1.0,
            replay_capacity: 1_000_000,
            warmup: 1000,
            updates_per_decision: 1,
            log_std_bounds: [-5.0, 2.0],
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl SacConfig {
    /// Smaller networks and batches for single-core runs.
    pub fn desk() -> Self {
        Self { hidden: vec![64, 64], batch: 64, lr_actor: 1e-3, lr_critic: 1e-3, lr_alpha: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = !self.hidden.is_empty()
            && self.batch > 0
            && (0.0..1.0).contains(&self.discount)
            && self.polyak > 0.0
            && self.polyak <= 1.0
            && self.init_alpha > 0.0
            && self.replay_capacity >= self.batch
            && self.log_std_bounds[0] < self.log_std_bounds[1];
        if ok {
            Ok(())
        } else {
            Err(format!("bad SAC configuration: {self:?}"))
        }
    }
}

/// Uniform-sampling ring buffer of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    capacity: usize,
    next: usize,
    pub obs: Vec<[f64; OBS_DIM]>,
    pub act: Vec<f64>,
    pub rew: Vec<f64>,
    pub obs2: Vec<[f64; OBS_DIM]>,
    pub done: Vec<bool>,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, next: 0, obs: Vec::new(), act: Vec::new(), rew: Vec::new(), obs2: Vec::new(), done: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Store one transition; `act` is the squashed action in `[-1, 1]`.
    pub fn push(&mut self, obs: [f64; OBS_DIM], act: f64, rew: f64, obs2: [f64; OBS_DIM], done: bool) {
        if self.obs.len() < self.capacity {
            self.obs.push(obs);
            self.act.push(act);
            self.rew.push(rew);
            self.obs2.push(obs2);
            self.done.push(done);
        } else {
            let i = self.next;
            self.obs[i] = obs;
            self.act[i] = act;
            self.rew[i] = rew;
            self.obs2[i] = obs2;
            self.done[i] = done;
        }
        self.next = (self.next + 1) % self.capacity;
    }
}

/// Policy head: `(mean, log_std)` from the actor output row.
fn log_std(raw: f64, b: [f64; 2]) -> f64 {
    b[0] + 0.5 * (b[1] - b[0]) * (raw.tanh() + 1.0)
}

fn d_log_std(raw: f64, b: [f64; 2]) -> f64 {
    let t = raw.tanh();
    0.5 * (b[1] - b[0]) * (1.0 - t * t)
}

/// Squashed sample and its log-density for unit noise `eps`.
fn squash(mu: f64, ls: f64, eps: f64) -> (f64, f64) {
    let a = (mu + ls.exp() * eps).tanh();
    let logp = -0.5 * eps * eps - ls - LOG_SQRT_2PI - (1.0 - a * a + SQUASH_EPS).ln();
    (a, logp)
}

/// `[obs | action]` rows for the critics.
pub fn critic_input(obs: ArrayView2<f64>, act: &[f64]) -> Array2<f64> {
    let (n, d) = obs.dim();
    let mut x = Array2::zeros((n, d + 1));
    x.slice_mut(s![.., ..d]).assign(&obs);
    for (i, a) in act.iter().enumerate() {
        x[[i, d]] = *a;
    }
    x
}

/// Mean squared error of `q` against `targets` and its parameter gradient.
pub fn critic_loss_grads(q: &Mlp, input: ArrayView2<f64>, targets: &[f64]) -> (f64, Grads) {
    let n = targets.len() as f64;
    let cache = q.forward_cached(input);
    let out = cache.output();
    let mut g = Array2::zeros((targets.len(), 1));
    let mut loss = 0.0;
    for (i, y) in targets.iter().enumerate() {
        let e = out[[i, 0]] - y;
        loss += e * e / n;
        g[[i, 0]] = 2.0 * e / n;
    }
    (loss, q.backward(&cache, g.view()).0)
}

/// Result of the policy objective `E[α log π(a|s) - min Q(s, a)]`.
pub struct ActorStep {
    pub loss: f64,
    pub grads: Grads,
    pub mean_logp: f64,
}

/// Policy loss and gradient with reparameterised noise `eps` (one per row).
pub fn actor_loss_grads(actor: &Mlp, q1: &Mlp, q2: &Mlp, obs: ArrayView2<f64>, eps: &[f64], alpha: f64, bounds: [f64; 2]) -> ActorStep {
    let n = eps.len();
    let nf = n as f64;
    let cache = actor.forward_cached(obs);
    let out = cache.output();
    let mut acts = vec![0.0; n];
    let mut logps = vec![0.0; n];
    for i in 0..n {
        let (a, lp) = squash(out[[i, 0]], log_std(out[[i, 1]], bounds), eps[i]);
        acts[i] = a;
        logps[i] = lp;
    }
    let xin = critic_input(obs, &acts);
    let c1 = q1.forward_cached(xin.view());
    let c2 = q2.forward_cached(xin.view());
    let use_first: Vec<bool> = (0..n).map(|i| c1.output()[[i, 0]] <= c2.output()[[i, 0]]).collect();
    let sel = |first: bool| Array2::from_shape_fn((n, 1), |(i, _)| if use_first[i] == first { 1.0 } else { 0.0 });
    let (_, gin1) = q1.backward(&c1, sel(true).view());
    let (_, gin2) = q2.backward(&c2, sel(false).view());
    let d = obs.ncols();

    let mut loss = 0.0;
    let mut g = Array2::zeros((n, 2));
    for i in 0..n {
        let qmin = if use_first[i] { c1.output()[[i, 0]] } else { c2.output()[[i, 0]] };
        loss += (alpha * logps[i] - qmin) / nf;
        let dq_da = gin1[[i, d]] + gin2[[i, d]];
        let a = acts[i];
        let da_du = 1.0 - a * a;
        // d/du of -log(1 - tanh(u)² + c)
        let dsq = 2.0 * a * da_du / (da_du + SQUASH_EPS);
        let raw = out[[i, 1]];
        let sigma = log_std(raw, bounds).exp();
        let dl_du = alpha * dsq - dq_da * da_du;
        g[[i, 0]] = dl_du / nf;
        let dl_dls = -alpha + dl_du * sigma * eps[i];
        g[[i, 1]] = dl_dls * d_log_std(raw, bounds) / nf;
    }
    let (grads, _) = actor.backward(&cache, g.view());
    ActorStep { loss, grads, mean_logp: logps.iter().sum::<f64>() / nf }
}

/// Losses of one update, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub skipped: bool,
}

/// Scalar Adam for the log-temperature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub t: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn step(&mut self, x: &mut f64, g: f64, lr: f64) {
        let (b1, b2) = (0.9, 0.999);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t as i32));
        let vh = self.v / (1.0 - b2.powi(self.t as i32));
        *x -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub cfg: SacConfig,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub opt_actor: Adam,
    pub opt_q1: Adam,
    pub opt_q2: Adam,
    pub log_alpha: f64,
    pub opt_alpha: ScalarAdam,
    pub obs_norm: Normalizer,
    pub rng: ChaCha8Rng,
    pub updates: u64,
    pub skipped_updates: u64,
}

impl Agent {
    pub fn new(cfg: SacConfig, obs_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sizes_a = vec![obs_dim];
        sizes_a.extend(&cfg.hidden);
        sizes_a.push(2);
        let mut sizes_q = vec![obs_dim + 1];
        sizes_q.extend(&cfg.hidden);
        sizes_q.push(1);
        let actor = Mlp::new(&sizes_a, &mut rng);
        let q1 = Mlp::new(&sizes_q, &mut rng);
        let q2 = Mlp::new(&sizes_q, &mut rng);
        let adam = |lr: f64| AdamConfig { lr, clip: cfg.grad_clip, ..AdamConfig::default() };
        Self {
            opt_actor: Adam::new(adam(cfg.lr_actor), &actor),
            opt_q1: Adam::new(adam(cfg.lr_critic), &q1),
            opt_q2: Adam::new(adam(cfg.lr_critic), &q2),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            log_alpha: cfg.init_alpha.ln(),
            opt_alpha: ScalarAdam::default(),
            obs_norm: Normalizer::identity(obs_dim),
            rng,
            updates: 0,
            skipped_updates: 0,
            cfg,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn normalised(&self, obs: &[f64]) -> Vec<f64> {
        let mut o = obs.to_vec();
        self.obs_norm.apply(&mut o);
        o
    }

    /// Squashed action in `[-1, 1]`.
    pub fn act(&mut self, obs: &[f64], deterministic: bool) -> f64 {
        let out = self.actor.forward_one(&self.normalised(obs));
        if deterministic {
            out[0].tanh()
        } else {
            let eps: f64 = self.rng.sample(StandardNormal);
            squash(out[0], log_std(out[1], self.cfg.log_std_bounds), eps).0
        }
    }

    /// Deterministic action without touching the generator.
    pub fn act_deterministic(&self, obs: &[f64]) -> f64 {
        self.actor.forward_one(&self.normalised(obs))[0].tanh()
    }

    fn batch_obs(&self, rows: impl Iterator<Item = [f64; OBS_DIM]>, n: usize) -> Array2<f64> {
        let mut m = Array2::zeros((n, OBS_DIM));
        for (i, mut r) in rows.enumerate() {
            self.obs_norm.apply(&mut r);
            for (j, v) in r.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        m
    }

    /// One gradient step on critics, actor and temperature from a uniform
    /// minibatch; skipped when any loss is non-finite.
    pub fn update(&mut self, replay: &Replay) -> UpdateReport {
        let b = self.cfg.batch.min(replay.len());
        if b == 0 {
            return UpdateReport { skipped: true, ..Default::default() };
        }
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..replay.len())).collect();
        let obs = self.batch_obs(idx.iter().map(|&i| replay.obs[i]), b);
        let obs2 = self.batch_obs(idx.iter().map(|&i| replay.obs2[i]), b);
        let act: Vec<f64> = idx.iter().map(|&i| replay.act[i]).collect();
        let alpha = self.alpha();
        let bounds = self.cfg.log_std_bounds;

        // Soft Bellman targets from the next-state policy and target critics.
        let out2 = self.actor.forward(obs2.view());
        let mut a2 = vec![0.0; b];
        let mut lp2 = vec![0.0; b];
        for i in 0..b {
            let eps: f64 = self.rng.sample(StandardNormal);
            let (a, lp) = squash(out2[[i, 0]], log_std(out2[[i, 1]], bounds), eps);
            a2[i] = a;
            lp2[i] = lp;
        }
        let x2 = critic_input(obs2.view(), &a2);
        let t1 = self.q1_target.forward(x2.view());
        let t2 = self.q2_target.forward(x2.view());
        let targets: Vec<f64> = (0..b)
            .map(|k| {
                let i = idx[k];
                let soft = t1[[k, 0]].min(t2[[k, 0]]) - alpha * lp2[k];
                replay.rew[i] + if replay.done[i] { 0.0 } else { self.cfg.discount * soft }
            })
            .collect();
        let x = critic_input(obs.view(), &act);
        let (l1, g1) = critic_loss_grads(&self.q1, x.view(), &targets);
        let (l2, g2) = critic_loss_grads(&self.q2, x.view(), &targets);

        let eps: Vec<f64> = (0..b).map(|_| self.rng.sample(StandardNormal)).collect();
        if !(l1.is_finite() && l2.is_finite() && g1.is_finite() && g2.is_finite()) {
            self.skipped_updates += 1;
            log::warn!("non-finite critic loss at update {}; skipped", self.updates);
            return UpdateReport { skipped: true, ..Default::default() };
        }
        self.opt_q1.step(&mut self.q1, &g1);
        self.opt_q2.step(&mut self.q2, &g2);

        let step = actor_loss_grads(&self.actor, &self.q1, &self.q2, obs.view(), &eps, alpha, bounds);
        if !(step.loss.is_finite() && step.grads.is_finite()) {
            self.skipped_updates += 1;
            log::warn!("non-finite actor loss at update {}; skipped", self.updates);
            return UpdateReport { skipped: true, ..Default::default() };
        }
        self.opt_actor.step(&mut self.actor, &step.grads);
        // d/d log α of -log α (log π + H_t), with log π held fixed.
        let g_alpha = -(step.mean_logp + self.cfg.target_entropy);
        self.opt_alpha.step(&mut self.log_alpha, g_alpha, self.cfg.lr_alpha);

        self.q1_target.polyak_from(&self.q1, self.cfg.polyak);
        self.q2_target.polyak_from(&self.q2, self.cfg.polyak);
        self.updates += 1;
        UpdateReport { critic_loss: 0.5 * (l1 + l2), actor_loss: step.loss, alpha: self.alpha(), entropy: -step.mean_logp, skipped: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> (Mlp, Mlp, Mlp, Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = Mlp::new(&[3, 2, 2], &mut rng);
        let q1 = Mlp::new(&[4, 2, 1], &mut rng);
        let q2 = Mlp::new(&[4, 2, 1], &mut rng);
        let obs = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let eps: Vec<f64> = (0..5).map(|i| (i as f64 * 1.3).cos()).collect();
        (actor, q1, q2, obs, eps)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let (actor, q1, q2, obs, eps) = mini();
        let bounds = [-5.0, 2.0];
        let step = actor_loss_grads(&actor, &q1, &q2, obs.view(), &eps, 0.3, bounds);
        let analytic = step.grads.flat();
        let p0 = actor.params_flat();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut a = actor.clone();
            let mut p = p0.clone();
            p[k] += h;
            a.set_params_flat(&p);
            let up = actor_loss_grads(&a, &q1, &q2, obs.view(), &eps, 0.3, bounds).loss;
            p[k] -= 2.0 * h;
            a.set_params_flat(&p);
            let down = actor_loss_grads(&a, &q1, &q2, obs.view(), &eps, 0.3, bounds).loss;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, analytic[k]) < 1e-3, "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let (_, q1, _, obs, eps) = mini();
        let x = critic_input(obs.view(), &eps.iter().map(|e| e.tanh()).collect::<Vec<_>>());
        let y: Vec<f64> = (0..5).map(|i| i as f64 * 0.2 - 0.5).collect();
        let (_, g) = critic_loss_grads(&q1, x.view(), &y);
        let analytic = g.flat();
        let p0 = q1.params_flat();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut q = q1.clone();
            let mut p = p0.clone();
            p[k] += h;
            q.set_params_flat(&p);
            let up = critic_loss_grads(&q, x.view(), &y).0;
            p[k] -= 2.0 * h;
            q.set_params_flat(&p);
            let down = critic_loss_grads(&q, x.view(), &y).0;
            assert!(rel_err((up - down) / (2.0 * h), analytic[k]) < 1e-3);
        }
    }

    fn filled_replay(n: usize) -> Replay {
        let mut r = Replay::new(1000);
        for i in 0..n {
            let mut o = [0.0; OBS_DIM];
            for (j, v) in o.iter_mut().enumerate() {
                *v = ((i * 7 + j) as f64 * 0.13).sin();
            }
            r.push(o, (i as f64 * 0.7).sin(), -(i as f64 % 3.0), o, i % 17 == 0);
        }
        r
    }

    #[test]
    fn actions_bounded_and_deterministic_mode_fixed() {
        let mut agent = Agent::new(SacConfig { hidden: vec![8], ..SacConfig::desk() }, OBS_DIM);
        let obs = [3.0; OBS_DIM];
        for _ in 0..100 {
            assert!(agent.act(&obs, false).abs() <= 1.0);
        }
        assert_eq!(agent.act(&obs, true), agent.act(&obs, true));
        assert_eq!(agent.act(&obs, true), agent.act_deterministic(&obs));
    }

    #[test]
    fn updates_are_reproducible() {
        let replay = filled_replay(300);
        let cfg = SacConfig { hidden: vec![16, 16], batch: 32, ..SacConfig::desk() };
        let mut a = Agent::new(cfg.clone(), OBS_DIM);
        let mut b = Agent::new(cfg, OBS_DIM);
        for _ in 0..100 {
            let ra = a.update(&replay);
            let rb = b.update(&replay);
            assert_eq!(ra, rb);
            assert!(!ra.skipped && ra.alpha > 0.0);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn temperature_falls_when_entropy_exceeds_target() {
        let replay = filled_replay(200);
        // A very low target entropy is always exceeded by a fresh policy.
        let cfg = SacConfig { hidden: vec![8], batch: 16, target_entropy: -20.0, ..SacConfig::desk() };
        let mut agent = Agent::new(cfg, OBS_DIM);
        let a0 = agent.alpha();
        for _ in 0..20 {
            agent.update(&replay);
        }
        assert!(agent.alpha() < a0);
    }

    #[test]
    fn targets_move_only_by_polyak() {
        let replay = filled_replay(100);
        let cfg = SacConfig { hidden: vec![8], batch: 16, ..SacConfig::desk() };
        let mut agent = Agent::new(cfg, OBS_DIM);
        let before = agent.q1_target.clone();
        let mut expect = before.clone();
        agent.update(&replay);
        expect.polyak_from(&agent.q1, agent.cfg.polyak);
        assert_eq!(agent.q1_target, expect);
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut r = Replay::new(3);
        for i in 0..5 {
            r.push([i as f64; OBS_DIM], 0.0, i as f64, [0.0; OBS_DIM], false);
        }
        assert_eq!(r.len(), 3);
        assert_eq!(r.rew, vec![3.0, 4.0, 2.0]);
    }
}
