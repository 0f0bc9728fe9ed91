//! Oracle suites behind the `selftest` command.
//!
//! Each suite checks the learner against an independent computation: central
//! finite differences for gradients, Monte-Carlo frequencies for the
//! confidence probability, and closed-form returns for the critic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::{draw_noise, policy_improvement, AgentConfig, AgentParams, CriticKind, PolicyKind};
use crate::buffer::{ReplayBuffers, Transition};
use crate::dist::{confidence_probability, intervene, pv_grads, td_grads, GaussianReturn, ProxyTarget, SwitchConfig};
use crate::dpvp::{dpvp_update, AgentOptim, LearnerConfig};
use crate::nn::{Matrix, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> (bool, String)) -> SuiteOutcome {
    let t = Instant::now();
    let (passed, detail) = body();
    SuiteOutcome {
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Worst relative error of the loss-path gradients over `cases` random draws.
/// The mean path differentiates `(c - Q)^2 / (2 sigma^2)` in `Q`; the std path
/// differentiates `eta * ((c - Q)^2 / (2 sigma^2) + ln sigma)` in `sigma`.
pub fn loss_path_errors(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let q = rng.gen_range(-5.0..5.0);
        let sigma = rng.gen_range(0.05..5.0);
        let eta = rng.gen_range(0.01..2.0);
        let (c, g) = if i % 2 == 0 {
            let t = if rng.gen_bool(0.5) { ProxyTarget::Human } else { ProxyTarget::Novice };
            (t.value(), pv_grads(t, GaussianReturn::new(q, sigma), eta).unwrap())
        } else {
            let c = rng.gen_range(-10.0..10.0);
            (c, td_grads(c, GaussianReturn::new(q, sigma), eta).unwrap())
        };
        let l_mean = |m: f64| (c - m).powi(2) / (2.0 * sigma * sigma);
        let l_std = |s: f64| eta * ((c - q).powi(2) / (2.0 * s * s) + s.ln());
        let fd_m = central(l_mean, q, 1e-5 * (1.0 + q.abs()));
        let fd_s = central(l_std, sigma, 1e-6 * sigma);
        worst = worst.max(rel_err(g.d_mean, fd_m, 1e-8)).max(rel_err(g.d_std, fd_s, 1e-8));
    }
    worst
}

fn random_net(rng: &mut ChaCha8Rng, seed: u64) -> ParamSet {
    let mut sizes = vec![rng.gen_range(1..6)];
    for _ in 0..rng.gen_range(1..3) {
        sizes.push(rng.gen_range(1..8));
    }
    sizes.push(rng.gen_range(1..4));
    let mut net = ParamSet::new(&sizes, seed);
    let mut flat = net.flatten();
    for v in flat.iter_mut() {
        *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    net.unflatten(&flat).unwrap();
    net
}

/// Worst relative error of backprop against finite differences of
/// `sum(adjoint * output)` over every parameter and input of random nets.
pub fn backward_errors(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let net = random_net(&mut rng, seed ^ case as u64);
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let adj: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |n: &ParamSet, x: &[f64]| n.forward(x).unwrap().iter().zip(&adj).map(|(o, a)| o * a).sum::<f64>();
        let (grads, dx) = net.backward(&x, &adj).unwrap();
        let g = grads.flatten();
        let mut flat = net.flatten();
        let mut probe = net.clone();
        for k in 0..flat.len() {
            let orig = flat[k];
            let h = 1e-6;
            flat[k] = orig + h;
            probe.unflatten(&flat).unwrap();
            let up = objective(&probe, &x);
            flat[k] = orig - h;
            probe.unflatten(&flat).unwrap();
            let down = objective(&probe, &x);
            flat[k] = orig;
            worst = worst.max(rel_err(g[k], (up - down) / (2.0 * h), 1e-5));
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            let fd = central(
                |v| {
                    xp[k] = v;
                    objective(&net, &xp)
                },
                x[k],
                1e-6,
            );
            worst = worst.max(rel_err(dx[k], fd, 1e-5));
        }
    }
    worst
}

/// Worst relative error of the pathwise policy gradient against finite
/// differences of the batch loss with the critic and noise held fixed.
pub fn policy_gradient_errors(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let obs_dim = rng.gen_range(1..5);
        let agent = AgentParams::new(AgentConfig {
            obs_dim,
            hidden: vec![rng.gen_range(2..7)],
            seed: seed.wrapping_add(case as u64),
            ..AgentConfig::default()
        });
        let n = rng.gen_range(1..5);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let obs = Matrix::from_rows(&rows);
        let eps: Vec<_> = (0..n).map(|_| draw_noise(&mut rng)).collect();
        let alpha = rng.gen_range(0.01..0.5);
        let (lo, hi) = (agent.cfg.std_min, agent.cfg.std_max);
        let critic = agent.critic(CriticKind::Proxy);
        let policy = agent.policy(PolicyKind::Guided);
        let g = policy_improvement(policy, critic, &obs, &eps, alpha, lo, hi).unwrap().grads.flatten();
        let mut flat = policy.flatten();
        let mut probe = policy.clone();
        let loss = |p: &ParamSet| policy_improvement(p, critic, &obs, &eps, alpha, lo, hi).unwrap().loss;
        for k in 0..flat.len() {
            let orig = flat[k];
            let h = 1e-6;
            flat[k] = orig + h;
            probe.unflatten(&flat).unwrap();
            let up = loss(&probe);
            flat[k] = orig - h;
            probe.unflatten(&flat).unwrap();
            let down = loss(&probe);
            flat[k] = orig;
            worst = worst.max(rel_err(g[k], (up - down) / (2.0 * h), 1e-5));
        }
    }
    worst
}

pub fn gradient_suite() -> SuiteOutcome {
    timed("gradient suite", || {
        let a = loss_path_errors(500, 11);
        let b = backward_errors(200, 12);
        let c = policy_gradient_errors(20, 13);
        let ok = a <= 1e-6 && b <= 1e-4 && c <= 1e-3;
        (ok, format!("loss paths {a:.2e} (<= 1e-6), backward {b:.2e} (<= 1e-4), policy {c:.2e} (<= 1e-3)"))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceErrors {
    /// Largest |p - Monte-Carlo frequency|.
    pub mc: f64,
    /// Largest |p(a, b) + p(b, a) - 1|.
    pub symmetry: f64,
    /// Pairs where the `delta = 0.5` switch disagrees with the mean argmax.
    pub argmax_mismatches: usize,
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> GaussianReturn {
    GaussianReturn::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.05..3.0))
}

pub fn confidence_errors(pairs: usize, draws: usize, argmax_pairs: usize, seed: u64) -> ConfidenceErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mc: f64 = 0.0;
    for _ in 0..pairs {
        let (zr, zg) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let p = confidence_probability(zr, zg).unwrap();
        let mut wins = 0usize;
        for _ in 0..draws {
            let xr = zr.sample_with(rng.sample(StandardNormal));
            let xg = zg.sample_with(rng.sample(StandardNormal));
            wins += (xr > xg) as usize;
        }
        mc = mc.max((p - wins as f64 / draws as f64).abs());
    }
    let mut symmetry: f64 = 0.0;
    let half = SwitchConfig::new(0.5, SwitchConfig::default().std_max).unwrap();
    let mut argmax_mismatches = 0;
    for _ in 0..argmax_pairs {
        let (a, b) = (random_gaussian(&mut rng), random_gaussian(&mut rng));
        let pab = confidence_probability(a, b).unwrap();
        let pba = confidence_probability(b, a).unwrap();
        symmetry = symmetry.max((pab + pba - 1.0).abs());
        let keeps_guided = intervene(pab, &half);
        argmax_mismatches += (keeps_guided == (a.mean > b.mean)) as usize;
    }
    ConfidenceErrors {
        mc,
        symmetry,
        argmax_mismatches,
    }
}

pub fn confidence_suite() -> SuiteOutcome {
    timed("confidence suite", || {
        let e = confidence_errors(50, 1_000_000, 10_000, 21);
        let ok = e.mc <= 1e-2 && e.symmetry <= 1e-12 && e.argmax_mismatches == 0;
        (ok, format!("MC gap {:.2e} (<= 1e-2), symmetry {:.1e} (<= 1e-12), delta=0.5 argmax mismatches {}", e.mc, e.symmetry, e.argmax_mismatches))
    })
}

/// A frozen buffer where every step was taken over: the expert always
/// pushes `[0.5, 0]` while the novice proposed something else.
pub fn takeover_buffer(n: usize, obs_dim: usize, seed: u64) -> ReplayBuffers {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ReplayBuffers::new(n, n);
    for _ in 0..n {
        let obs: Vec<f64> = (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let next_obs: Vec<f64> = obs.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        b.record(Transition {
            obs,
            a_g: [rng.gen_range(-1.0..-0.2), rng.gen_range(-0.8..0.8)],
            a_h: Some([0.5, 0.0]),
            reward: rng.gen_range(-1.0..1.0),
            next_obs,
            done: false,
        });
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagation {
    /// Smallest `Z^g(s, a_h)` mean over the buffer.
    pub min_human: f64,
    /// Largest `Z^g(s, a_g)` mean over the buffer.
    pub max_novice: f64,
    /// `Z^g` came out bit-identical when every reward was replaced.
    pub reward_free: bool,
}

pub fn proxy_propagation(updates: usize, seed: u64) -> Propagation {
    let obs_dim = 4;
    let cfg = LearnerConfig {
        batch_size: 32,
        lr_critic: 1e-3,
        ..LearnerConfig::default()
    };
    let run = |buffers: &ReplayBuffers| {
        let mut agent = AgentParams::new(AgentConfig {
            obs_dim,
            hidden: vec![32, 32],
            seed,
            ..AgentConfig::default()
        });
        let mut optim = AgentOptim::new(&agent, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..updates {
            dpvp_update(buffers, &mut agent, &mut optim, &cfg, &mut rng).unwrap();
        }
        agent
    };
    let buffers = takeover_buffer(64, obs_dim, seed);
    let agent = run(&buffers);
    let mut shuffled = buffers.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for buf in [&mut shuffled.novice, &mut shuffled.human] {
        *buf = crate::buffer::RingBuffer::from_parts(
            buf.capacity(),
            buf.items()
                .iter()
                .map(|t| Transition {
                    reward: rng.gen_range(-100.0..100.0),
                    ..t.clone()
                })
                .collect(),
            buf.head(),
            buf.inserted(),
        )
        .unwrap();
    }
    let twin = run(&shuffled);
    let mut min_human = f64::INFINITY;
    let mut max_novice = f64::NEG_INFINITY;
    for t in buffers.human.items() {
        min_human = min_human.min(agent.critic_eval(CriticKind::Proxy, &t.obs, t.a_h.unwrap()).unwrap().mean);
        max_novice = max_novice.max(agent.critic_eval(CriticKind::Proxy, &t.obs, t.a_g).unwrap().mean);
    }
    Propagation {
        min_human,
        max_novice,
        reward_free: twin.z_g.flatten() == agent.z_g.flatten() && twin.z_c.flatten() != agent.z_c.flatten(),
    }
}

pub fn propagation_suite() -> SuiteOutcome {
    timed("proxy-value propagation", || {
        let p = proxy_propagation(500, 31);
        let ok = p.min_human > 0.5 && p.max_novice < -0.5 && p.reward_free;
        (ok, format!("min Z^g(s,a_h) {:.3} (> 0.5), max Z^g(s,a_g) {:.3} (< -0.5), reward-free {}", p.min_human, p.max_novice, p.reward_free))
    })
}

/// Three states visited in order, then termination.
pub const CHAIN_REWARDS: [f64; 3] = [1.0, 0.5, 2.0];

/// Largest gap between the learned `Z^c` mean and the discounted return on the
/// chain, evaluated at the buffered actions.
pub fn chain_fidelity(updates: usize, gamma: f64, seed: u64) -> f64 {
    let onehot = |i: usize| -> Vec<f64> { (0..3).map(|k| (k == i) as u8 as f64).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ReplayBuffers::new(300, 1);
    for _ in 0..100 {
        for (i, &r) in CHAIN_REWARDS.iter().enumerate() {
            b.record(Transition {
                obs: onehot(i),
                a_g: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                a_h: None,
                reward: r,
                next_obs: onehot((i + 1) % 3),
                done: i == 2,
            });
        }
    }
    let cfg = LearnerConfig {
        gamma,
        batch_size: 64,
        lr_critic: 1e-3,
        lr_alpha: 1e-12,
        ..LearnerConfig::default()
    };
    let mut agent = AgentParams::new(AgentConfig {
        obs_dim: 3,
        hidden: vec![32, 32],
        seed,
        ..AgentConfig::default()
    });
    agent.log_alpha = -40.0;
    let mut optim = AgentOptim::new(&agent, &cfg);
    for _ in 0..updates {
        dpvp_update(&b, &mut agent, &mut optim, &cfg, &mut rng).unwrap();
    }
    let mut value = [0.0; 3];
    for i in (0..3).rev() {
        value[i] = CHAIN_REWARDS[i] + if i < 2 { gamma * value[i + 1] } else { 0.0 };
    }
    b.novice
        .items()
        .iter()
        .map(|t| {
            let i = t.obs.iter().position(|&v| v == 1.0).unwrap();
            (agent.critic_eval(CriticKind::Confidence, &t.obs, t.a_g).unwrap().mean - value[i]).abs()
        })
        .fold(0.0, f64::max)
}

pub fn critic_suite() -> SuiteOutcome {
    timed("critic fidelity", || {
        let gap = chain_fidelity(5000, 0.9, 41);
        (gap <= 0.05, format!("largest |Z^c - return| {gap:.4} (<= 0.05)"))
    })
}

pub fn run_all() -> Vec<SuiteOutcome> {
    vec![gradient_suite(), confidence_suite(), propagation_suite(), critic_suite()]
}
