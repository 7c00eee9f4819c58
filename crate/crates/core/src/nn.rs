//! Small dense networks with tanh hidden layers, manual backprop and Adam.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(inputs, outputs)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Fully connected network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
pub struct Cache {
    /// Input to every layer; the last entry is the network output.
    acts: Vec<Array2<f64>>,
}

impl Cache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("non-empty cache")
    }
}

/// Parameter gradients, same shapes as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers.iter().map(|l| l.w.iter().chain(l.b.iter()).map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|g| g.is_finite()))
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.w) + &l.b;
            if i < last {
                a.mapv_inplace(f64::tanh);
            }
        }
        a
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(v).into_raw_vec_and_offset().0
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Cache {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&l.w) + &l.b;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        Cache { acts }
    }

    /// Back-propagate `d loss / d output`; returns parameter gradients and
    /// `d loss / d input`.
    pub fn backward(&self, cache: &Cache, grad_out: ArrayView2<f64>) -> (Grads, Array2<f64>) {
        let last = self.layers.len() - 1;
        let mut delta = grad_out.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // tanh' = 1 - tanh²
                let a = &cache.acts[i + 1];
                delta.zip_mut_with(a, |d, &t| *d *= 1.0 - t * t);
            }
            let gw = cache.acts[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            delta = delta.dot(&self.layers[i].w.t());
        }
        grads.reverse();
        (Grads { layers: grads }, delta)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect()
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut it = p.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
    }

    /// `self <- tau * src + (1 - tau) * self`.
    pub fn polyak_from(&mut self, src: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&src.layers) {
            t.w.zip_mut_with(&s.w, |a, &b| *a = tau * b + (1.0 - tau) * *a);
            t.b.zip_mut_with(&s.b, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.w.nrows() as u64).to_le_bytes())?;
            w.write_all(&(l.w.ncols() as u64).to_le_bytes())?;
        }
        write_f64s(w, &self.params_flat())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        let n = read_u32(r)? as usize;
        if n == 0 || n > 64 {
            return Err(invalid("bad layer count"));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let i = read_u64(r)? as usize;
            let o = read_u64(r)? as usize;
            if i == 0 || o == 0 || i > 1 << 16 || o > 1 << 16 {
                return Err(invalid("bad layer shape"));
            }
            layers.push(Dense { w: Array2::zeros((i, o)), b: Array1::zeros(o) });
        }
        let mut net = Mlp { layers };
        let p = read_f64s(r, net.n_params())?;
        net.set_params_flat(&p);
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables it.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, net: &Mlp) -> Self {
        let n = net.n_params();
        Self { cfg, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        let mut g = grads.flat();
        if self.cfg.clip > 0.0 {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > self.cfg.clip {
                let s = self.cfg.clip / norm;
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut p = net.params_flat();
        for i in 0..p.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            p[i] -= c.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
        }
        net.set_params_flat(&p);
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_f64s(w, &[self.cfg.lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.clip])?;
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        write_f64s(w, &self.m)?;
        write_f64s(w, &self.v)
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        let c = read_f64s(r, 5)?;
        let cfg = AdamConfig { lr: c[0], beta1: c[1], beta2: c[2], eps: c[3], clip: c[4] };
        let t = read_u64(r)?;
        let n = read_u64(r)? as usize;
        if n > 1 << 26 {
            return Err(invalid("optimizer state too large"));
        }
        Ok(Self { cfg, t, m: read_f64s(r, n)?, v: read_f64s(r, n)? })
    }
}

/// Per-dimension affine standardisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Statistics of the rows of `data`; tiny spreads are floored to keep the
    /// map well conditioned.
    pub fn fit(data: ArrayView2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mean = data.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(data.ncols());
        for row in data.rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.mapv(|v| (v / n).sqrt().max(1e-6));
        Self { mean: mean.to_vec(), std: std.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            self.apply(row.as_slice_mut().expect("contiguous row"));
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        write_f64s(w, &self.mean)?;
        write_f64s(w, &self.std)
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        let n = read_u64(r)? as usize;
        if n > 1 << 16 {
            return Err(invalid("normalizer too large"));
        }
        Ok(Self { mean: read_f64s(r, n)?, std: read_f64s(r, n)? })
    }
}

fn invalid(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let out = net.forward(x.view());
        0.5 * (&out - y).mapv(|e| e * e).sum()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 4, 2], &mut rng);
        let x = array![[0.3, -1.2, 0.5], [1.0, 0.1, -0.7]];
        let y = array![[0.2, -0.1], [0.0, 0.4]];
        let cache = net.forward_cached(x.view());
        let g = cache.output() - &y;
        let (grads, gin) = net.backward(&cache, g.view());
        let analytic = grads.flat();
        let p0 = net.params_flat();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut n = net.clone();
            let mut p = p0.clone();
            p[i] += h;
            n.set_params_flat(&p);
            let lp = loss(&n, &x, &y);
            p[i] -= 2.0 * h;
            n.set_params_flat(&p);
            let lm = loss(&n, &x, &y);
            assert_relative_eq!(analytic[i], (lp - lm) / (2.0 * h), epsilon = 1e-7, max_relative = 1e-5);
        }
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let lp = loss(&net, &xp, &y);
                xp[[r, c]] -= 2.0 * h;
                let lm = loss(&net, &xp, &y);
                assert_relative_eq!(gin[[r, c]], (lp - lm) / (2.0 * h), epsilon = 1e-7, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn adam_fits_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[1, 16, 1], &mut rng);
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }, &net);
        let x = Array2::from_shape_fn((64, 1), |(i, _)| i as f64 / 32.0 - 1.0);
        let y = x.mapv(|v| 0.7 * v - 0.2);
        for _ in 0..2000 {
            let c = net.forward_cached(x.view());
            let g = (c.output() - &y) / 64.0;
            let (grads, _) = net.backward(&c, g.view());
            opt.step(&mut net, &grads);
        }
        assert!(loss(&net, &x, &y) / 64.0 < 1e-4);
    }

    #[test]
    fn serialization_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[5, 7, 3, 1], &mut rng);
        let opt = Adam::new(AdamConfig::default(), &net);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        opt.write_to(&mut buf).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(Mlp::read_from(&mut r).unwrap(), net);
        assert_eq!(Adam::read_from(&mut r).unwrap(), opt);
    }

    #[test]
    fn polyak_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::new(&[2, 2, 1], &mut rng);
        let mut t = Mlp::new(&[2, 2, 1], &mut rng);
        let before = t.params_flat();
        t.polyak_from(&a, 0.25);
        for ((n, o), s) in t.params_flat().iter().zip(before).zip(a.params_flat()) {
            assert_relative_eq!(*n, 0.25 * s + 0.75 * o, epsilon = 1e-15);
        }
    }

    #[test]
    fn normalizer_standardises() {
        let data = array![[1.0, 10.0], [3.0, 10.0]];
        let n = Normalizer::fit(data.view());
        let mut x = [3.0, 10.0];
        n.apply(&mut x);
        assert_relative_eq!(x[0], 1.0);
        assert_eq!(x[1], 0.0);
    }
}
