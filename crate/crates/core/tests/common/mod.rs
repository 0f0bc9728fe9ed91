//! Test-side reference math: forward-mode dual numbers and a plain MLP.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use handover::nn::ParamSet;

/// `v + d * e` with `e^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct D {
    pub v: f64,
    pub d: f64,
}

impl D {
    pub fn c(v: f64) -> D {
        D { v, d: 0.0 }
    }
    pub fn tanh(self) -> D {
        let t = self.v.tanh();
        D { v: t, d: self.d * (1.0 - t * t) }
    }
    pub fn exp(self) -> D {
        let e = self.v.exp();
        D { v: e, d: self.d * e }
    }
    pub fn ln(self) -> D {
        D { v: self.v.ln(), d: self.d / self.v }
    }
    /// `ln(1 + e^x)`.
    pub fn softplus(self) -> D {
        D {
            v: self.v.exp().ln_1p(),
            d: self.d / (1.0 + (-self.v).exp()),
        }
    }
    /// Drops the derivative.
    pub fn sg(self) -> D {
        D::c(self.v)
    }
}

impl Add for D {
    type Output = D;
    fn add(self, o: D) -> D {
        D { v: self.v + o.v, d: self.d + o.d }
    }
}
impl Sub for D {
    type Output = D;
    fn sub(self, o: D) -> D {
        D { v: self.v - o.v, d: self.d - o.d }
    }
}
impl Mul for D {
    type Output = D;
    fn mul(self, o: D) -> D {
        D { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}
impl Div for D {
    type Output = D;
    fn div(self, o: D) -> D {
        D { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}
impl Neg for D {
    type Output = D;
    fn neg(self) -> D {
        D { v: -self.v, d: -self.d }
    }
}
impl Mul<D> for f64 {
    type Output = D;
    fn mul(self, o: D) -> D {
        D { v: self * o.v, d: self * o.d }
    }
}
impl Add<f64> for D {
    type Output = D;
    fn add(self, o: f64) -> D {
        D { v: self.v + o, d: self.d }
    }
}

/// A tanh MLP held as layer sizes plus flat parameters laid out per layer as
/// row-major `n_out x n_in` weights followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub p: Vec<f64>,
}

impl Mlp {
    pub fn of(net: &ParamSet) -> Mlp {
        Mlp { sizes: net.sizes(), p: net.flatten() }
    }

    /// Forward pass with parameter `seed` (if any) carrying derivative 1.
    pub fn forward_d(&self, x: &[D], seed: Option<usize>) -> Vec<D> {
        let param = |i: usize| D { v: self.p[i], d: (seed == Some(i)) as u8 as f64 };
        let mut h: Vec<D> = x.to_vec();
        let mut at = 0;
        let n = self.sizes.len() - 1;
        for l in 0..n {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let mut out = Vec::with_capacity(no);
            for o in 0..no {
                let mut acc = param(at + ni * no + o);
                for i in 0..ni {
                    acc = acc + param(at + o * ni + i) * h[i];
                }
                out.push(if l + 1 < n { acc.tanh() } else { acc });
            }
            at += ni * no + no;
            h = out;
        }
        h
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let xd: Vec<D> = x.iter().map(|&v| D::c(v)).collect();
        self.forward_d(&xd, None).iter().map(|d| d.v).collect()
    }

    /// Gradient of `loss(self)` by one forward-mode sweep per parameter.
    pub fn grad(&self, loss: impl Fn(&Mlp, Option<usize>) -> D) -> Vec<f64> {
        (0..self.p.len()).map(|k| loss(self, Some(k)).d).collect()
    }
}

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Squashed-Gaussian sample and log-density from a policy output row.
/// Log-std is `bound * tanh(raw / bound)` with bound 1 above zero and 10 below.
pub fn squashed_sample(out: &[D], eps: [f64; 2]) -> ([D; 2], D) {
    let mut a = [D::c(0.0); 2];
    let mut lp = D::c(0.0);
    for j in 0..2 {
        let raw = out[2 + j];
        let bound = if raw.v >= 0.0 { 1.0 } else { 10.0 };
        let log_std = bound * (raw * D::c(1.0 / bound)).tanh();
        let u = out[j] + log_std.exp() * D::c(eps[j]);
        a[j] = u.tanh();
        // ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let log_jac = 2.0 * (D::c(std::f64::consts::LN_2) - u - (-2.0 * u).softplus());
        lp = lp + D::c(-0.5 * eps[j] * eps[j] - HALF_LN_2PI) - log_std - log_jac;
    }
    (a, lp)
}

/// Critic mean and std from its two outputs: `std = lo + softplus(raw)`,
/// constant `hi` once it reaches `hi`.
pub fn critic_head(out: &[D], lo: f64, hi: f64) -> (D, D) {
    let s = out[1].softplus() + lo;
    (out[0], if s.v >= hi { D::c(hi) } else { s })
}

/// Gaussian fit loss whose mean-path and std-path derivatives are the
/// learner's: the std is frozen on the mean path and the mean on the std path.
pub fn fit_loss(target: f64, m: D, s: D, eta: f64) -> D {
    let y = D::c(target);
    let e = y - m;
    let es = y - m.sg();
    e * e / (2.0 * s.sg() * s.sg()) + eta * (es * es / (2.0 * s * s) + s.ln())
}

pub fn consts(x: &[f64]) -> Vec<D> {
    x.iter().map(|&v| D::c(v)).collect()
}

/// Adam step applied to flat vectors, returning the new parameters.
pub fn adam(p: &[f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let t = step as i32;
    let c1 = 1.0 - f64::powi(b1, t);
    let c2 = 1.0 - f64::powi(b2, t);
    (0..p.len())
        .map(|i| {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps)
        })
        .collect()
}

pub fn blend(target: &[f64], online: &[f64], tau: f64) -> Vec<f64> {
    target.iter().zip(online).map(|(t, o)| t + tau * (o - t)).collect()
}

pub fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max)
}

/// A run small enough for debug-build tests: tiny nets, early learning.
pub fn quick_config(seed: u64, total_steps: u64) -> handover::train::TrainConfig {
    handover::train::TrainConfig {
        seed,
        total_steps,
        hidden: vec![16, 16],
        batch_size: 16,
        learning_starts: 32,
        stats_window: 50,
        scenario_pool: 4,
        ..handover::train::TrainConfig::default()
    }
}
