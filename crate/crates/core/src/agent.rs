//! Squashed-Gaussian policies, Gaussian return critics and the temperature.
//!
//! Policy networks emit `[mean_0, mean_1, raw_0, raw_1]`. The raw entries map
//! to a log standard deviation through a C1 soft clamp into
//! `[LOG_STD_MIN, LOG_STD_MAX]` that is the identity near zero, so a freshly
//! initialized policy starts with unit spread. Samples are squashed through
//! `tanh` into `[-1, 1]^2`.
//!
//! Critic networks read `obs ++ action` and emit `[mean, raw_std]`; the std is
//! produced by [`std_from_raw`].

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{self, std_from_raw, DistError, GaussianReturn};
use crate::nn::{GradSet, Matrix, NnError, ParamSet, Tape};

pub const ACTION_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Actions closer than this to the box edge are clamped before inversion.
pub const SATURATION_MARGIN: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("observation width {got}, expected {expected}")]
    ObsWidth { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Trained from takeovers; frozen once the self-learning stage starts.
    Guided,
    /// Reward-maximizing copy trained in the second stage.
    SelfLearning,
}

impl FromStr for PolicyKind {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(Self::Guided),
            "self_learning" => Ok(Self::SelfLearning),
            _ => Err(AgentError::UnknownTag(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// Reward-free proxy-value critic.
    Proxy,
    /// Rewarded critic used for confidence evaluation.
    Confidence,
}

impl FromStr for CriticKind {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proxy" => Ok(Self::Proxy),
            "confidence" => Ok(Self::Confidence),
            _ => Err(AgentError::UnknownTag(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub std_min: f64,
    pub std_max: f64,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            obs_dim: 38,
            hidden: vec![64, 64],
            std_min: dist::STD_MIN,
            std_max: dist::STD_MAX,
            target_entropy: -(ACTION_DIM as f64),
            init_alpha: 0.1,
            seed: 0,
        }
    }
}

/// Soft clamp of a raw output into the log-std range; returns the value and
/// its derivative.
pub fn log_std_from_raw(raw: f64) -> (f64, f64) {
    let bound = if raw >= 0.0 { LOG_STD_MAX } else { -LOG_STD_MIN };
    let t = (raw / bound).tanh();
    (bound * t, 1.0 - t * t)
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = if x > 30.0 { x } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

/// Decoded policy output for one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyHead {
    pub mean: Action,
    pub log_std: Action,
    /// d log_std / d raw
    pub dlog_std: Action,
}

/// One draw from a squashed Gaussian policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub action: Action,
    pub pre_squash: Action,
    pub log_prob: f64,
}

impl PolicyHead {
    pub fn from_output(out: &[f64]) -> Self {
        let mut head = PolicyHead {
            mean: [0.0; ACTION_DIM],
            log_std: [0.0; ACTION_DIM],
            dlog_std: [0.0; ACTION_DIM],
        };
        for j in 0..ACTION_DIM {
            head.mean[j] = out[j];
            let (l, d) = log_std_from_raw(out[ACTION_DIM + j]);
            head.log_std[j] = l;
            head.dlog_std[j] = d;
        }
        head
    }

    pub fn std(&self, j: usize) -> f64 {
        self.log_std[j].exp()
    }

    /// Reparameterized sample for fixed standard-normal noise.
    pub fn sample_with(&self, eps: Action) -> ActionSample {
        let mut pre = [0.0; ACTION_DIM];
        let mut action = [0.0; ACTION_DIM];
        let mut lp = 0.0;
        for j in 0..ACTION_DIM {
            pre[j] = self.mean[j] + self.std(j) * eps[j];
            action[j] = pre[j].tanh();
            lp += -0.5 * eps[j] * eps[j] - self.log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(pre[j]);
        }
        ActionSample {
            action,
            pre_squash: pre,
            log_prob: lp,
        }
    }

    pub fn mean_action(&self) -> Action {
        let mut a = [0.0; ACTION_DIM];
        for j in 0..ACTION_DIM {
            a[j] = self.mean[j].tanh();
        }
        a
    }

    /// Log-density of a squashed action, including the change of variables.
    pub fn log_prob(&self, action: Action) -> f64 {
        let mut lp = 0.0;
        for j in 0..ACTION_DIM {
            let mut a = action[j];
            let lim = 1.0 - SATURATION_MARGIN;
            if a.abs() > lim {
                log::debug!("action component {a} saturates; clamped to +-{lim}");
                a = a.clamp(-lim, lim);
            }
            let u = a.atanh();
            let z = (u - self.mean[j]) / self.std(j);
            lp += -0.5 * z * z - self.log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        lp
    }
}

pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R) -> Action {
    let mut eps = [0.0; ACTION_DIM];
    for e in eps.iter_mut() {
        *e = rng.sample(StandardNormal);
    }
    eps
}

/// Critic input row `obs ++ action`.
pub fn critic_input(obs: &[f64], action: &Action) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + ACTION_DIM);
    v.extend_from_slice(obs);
    v.extend_from_slice(action);
    v
}

/// Batched critic evaluation: the tape, decoded Gaussians, and `d std / d raw`.
pub fn critic_batch(net: &ParamSet, inputs: Matrix, std_min: f64, std_max: f64) -> Result<(Tape, Vec<GaussianReturn>, Vec<f64>)> {
    let tape = net.forward_batch(inputs)?;
    let out = tape.output();
    let mut zs = Vec::with_capacity(out.rows);
    let mut ds = Vec::with_capacity(out.rows);
    for r in 0..out.rows {
        let row = out.row(r);
        let (s, d) = std_from_raw(row[1], std_min, std_max);
        zs.push(GaussianReturn::new(row[0], s));
        ds.push(d);
    }
    Ok((tape, zs, ds))
}

pub fn policy_heads(tape: &Tape) -> Vec<PolicyHead> {
    let out = tape.output();
    (0..out.rows).map(|r| PolicyHead::from_output(out.row(r))).collect()
}

/// Result of one pathwise policy-gradient evaluation.
#[derive(Debug, Clone)]
pub struct PolicyImprovement {
    pub grads: GradSet,
    pub samples: Vec<ActionSample>,
    /// Mean of `Q(s, a)` over the batch.
    pub mean_q: f64,
    /// Batch mean of `alpha * log pi - Q`, the minimized loss.
    pub loss: f64,
}

/// Gradient of `mean_b [alpha * log pi(a_b | s_b) - Q(s_b, a_b)]` with respect
/// to the policy parameters, with `a_b = tanh(mu + sigma * eps_b)` and the
/// critic held fixed.
pub fn policy_improvement(
    policy: &ParamSet,
    critic: &ParamSet,
    obs: &Matrix,
    eps: &[Action],
    alpha: f64,
    std_min: f64,
    std_max: f64,
) -> Result<PolicyImprovement> {
    let n = obs.rows;
    if n == 0 || eps.len() != n {
        return Err(AgentError::EmptyBatch);
    }
    let tape_pi = policy.forward_batch(obs.clone())?;
    let heads = policy_heads(&tape_pi);
    let samples: Vec<ActionSample> = heads.iter().zip(eps).map(|(h, e)| h.sample_with(*e)).collect();

    let mut q_in = Matrix::zeros(n, obs.cols + ACTION_DIM);
    for r in 0..n {
        let row = q_in.row_mut(r);
        row[..obs.cols].copy_from_slice(obs.row(r));
        row[obs.cols..].copy_from_slice(&samples[r].action);
    }
    let (tape_q, zs, _) = critic_batch(critic, q_in, std_min, std_max)?;
    let mut q_adj = Matrix::zeros(n, 2);
    for r in 0..n {
        q_adj.row_mut(r)[0] = 1.0;
    }
    let mut scratch = critic.zero_grads();
    let dq_in = critic.backward_batch(&tape_q, &q_adj, &mut scratch)?;

    let inv_n = 1.0 / n as f64;
    let mut adj = Matrix::zeros(n, 2 * ACTION_DIM);
    let mut loss = 0.0;
    let mut mean_q = 0.0;
    for r in 0..n {
        let s = &samples[r];
        let h = &heads[r];
        loss += alpha * s.log_prob - zs[r].mean;
        mean_q += zs[r].mean;
        let dq = &dq_in.row(r)[obs.cols..];
        let row = adj.row_mut(r);
        for j in 0..ACTION_DIM {
            let a = s.action[j];
            let sq = 1.0 - a * a;
            let sigma = h.std(j);
            let d_mu = alpha * 2.0 * a - dq[j] * sq;
            let d_sigma = alpha * (-1.0 / sigma + 2.0 * a * eps[r][j]) - dq[j] * sq * eps[r][j];
            row[j] = inv_n * d_mu;
            row[ACTION_DIM + j] = inv_n * d_sigma * sigma * h.dlog_std[j];
        }
    }
    let mut grads = policy.zero_grads();
    policy.backward_batch(&tape_pi, &adj, &mut grads)?;
    Ok(PolicyImprovement {
        grads,
        samples,
        mean_q: mean_q * inv_n,
        loss: loss * inv_n,
    })
}

/// All network parameters of the agent plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub cfg: AgentConfig,
    pub pi_g: ParamSet,
    pub pi_r: ParamSet,
    pub z_g: ParamSet,
    pub z_c: ParamSet,
    pub pi_g_target: ParamSet,
    pub pi_r_target: ParamSet,
    pub z_g_target: ParamSet,
    pub z_c_target: ParamSet,
    pub log_alpha: f64,
    pub target_entropy: f64,
}

impl AgentParams {
    pub fn new(cfg: AgentConfig) -> Self {
        let mut p_sizes = vec![cfg.obs_dim];
        p_sizes.extend(&cfg.hidden);
        p_sizes.push(2 * ACTION_DIM);
        let mut c_sizes = vec![cfg.obs_dim + ACTION_DIM];
        c_sizes.extend(&cfg.hidden);
        c_sizes.push(2);
        let s = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let pi_g = ParamSet::new(&p_sizes, s ^ 1);
        let pi_r = ParamSet::new(&p_sizes, s ^ 2);
        let z_g = ParamSet::new(&c_sizes, s ^ 3);
        let z_c = ParamSet::new(&c_sizes, s ^ 4);
        Self {
            pi_g_target: pi_g.clone(),
            pi_r_target: pi_r.clone(),
            z_g_target: z_g.clone(),
            z_c_target: z_c.clone(),
            pi_g,
            pi_r,
            z_g,
            z_c,
            log_alpha: cfg.init_alpha.ln(),
            target_entropy: cfg.target_entropy,
            cfg,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn policy(&self, kind: PolicyKind) -> &ParamSet {
        match kind {
            PolicyKind::Guided => &self.pi_g,
            PolicyKind::SelfLearning => &self.pi_r,
        }
    }

    pub fn critic(&self, kind: CriticKind) -> &ParamSet {
        match kind {
            CriticKind::Proxy => &self.z_g,
            CriticKind::Confidence => &self.z_c,
        }
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.cfg.obs_dim {
            return Err(AgentError::ObsWidth {
                expected: self.cfg.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    pub fn head(&self, kind: PolicyKind, obs: &[f64]) -> Result<PolicyHead> {
        self.check_obs(obs)?;
        Ok(PolicyHead::from_output(&self.policy(kind).forward(obs)?))
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, kind: PolicyKind, obs: &[f64], rng: &mut R) -> Result<ActionSample> {
        let head = self.head(kind, obs)?;
        Ok(head.sample_with(draw_noise(rng)))
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mean_action(&self, kind: PolicyKind, obs: &[f64]) -> Result<Action> {
        Ok(self.head(kind, obs)?.mean_action())
    }

    pub fn log_prob(&self, kind: PolicyKind, obs: &[f64], action: Action) -> Result<f64> {
        Ok(self.head(kind, obs)?.log_prob(action))
    }

    pub fn critic_eval(&self, kind: CriticKind, obs: &[f64], action: Action) -> Result<GaussianReturn> {
        self.check_obs(obs)?;
        let out = self.critic(kind).forward(&critic_input(obs, &action))?;
        let (s, _) = std_from_raw(out[1], self.cfg.std_min, self.cfg.std_max);
        Ok(GaussianReturn::new(out[0], s))
    }

    /// One step on `log_alpha` toward `E[-log pi] = target_entropy`: entropy
    /// above target lowers the temperature, entropy below raises it.
    pub fn temperature_update(&mut self, batch_logps: &[f64], step_size: f64) -> Result<f64> {
        if batch_logps.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let entropy = -batch_logps.iter().sum::<f64>() / batch_logps.len() as f64;
        self.log_alpha -= step_size * (entropy - self.target_entropy);
        Ok(self.log_alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_agent() -> AgentParams {
        AgentParams::new(AgentConfig {
            obs_dim: 3,
            hidden: vec![8],
            seed: 4,
            ..AgentConfig::default()
        })
    }

    #[test]
    fn log_std_clamp_is_c1_at_zero() {
        let (v, d) = log_std_from_raw(0.0);
        assert_eq!((v, d), (0.0, 1.0));
        assert!(log_std_from_raw(-1e9).0 >= LOG_STD_MIN);
        assert!(log_std_from_raw(1e9).0 <= LOG_STD_MAX);
    }

    #[test]
    fn sample_logprob_consistency() {
        let agent = small_agent();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..200 {
            let obs = [0.1 * i as f64 % 1.0, -0.3, 0.7];
            let s = agent.sample_action(PolicyKind::Guided, &obs, &mut rng).unwrap();
            let lp = agent.log_prob(PolicyKind::Guided, &obs, s.action).unwrap();
            assert!((lp - s.log_prob).abs() < 1e-9, "{lp} vs {}", s.log_prob);
        }
    }

    #[test]
    fn symmetric_head_has_symmetric_density() {
        let head = PolicyHead::from_output(&[0.0, 0.0, -0.4, 0.2]);
        for a in [0.1, 0.5, 0.93] {
            assert!((head.log_prob([a, -a * 0.5]) - head.log_prob([-a, a * 0.5])).abs() < 1e-12);
        }
    }

    #[test]
    fn density_concentrates_as_std_shrinks() {
        let mut last = f64::NEG_INFINITY;
        for raw in [-1.0, -3.0, -6.0, -12.0] {
            let head = PolicyHead::from_output(&[0.3, -0.2, raw, raw]);
            let lp = head.log_prob(head.mean_action());
            assert!(lp > last);
            last = lp;
        }
        assert!(last > 10.0);
    }

    #[test]
    fn temperature_fixed_point_and_sign() {
        let mut a = small_agent();
        let la = a.log_alpha;
        a.temperature_update(&[2.0, 2.0], 0.1).unwrap(); // entropy -2 == target
        assert_eq!(a.log_alpha, la);
        a.temperature_update(&[-5.0], 0.1).unwrap(); // entropy 5 > target
        assert!(a.log_alpha < la);
        let lb = a.log_alpha;
        a.temperature_update(&[5.0], 0.1).unwrap(); // entropy -5 < target
        assert!(a.log_alpha > lb);
        assert_eq!(a.temperature_update(&[], 0.1), Err(AgentError::EmptyBatch));
    }

    #[test]
    fn tags_parse() {
        assert_eq!("guided".parse::<PolicyKind>().unwrap(), PolicyKind::Guided);
        assert!("expert".parse::<PolicyKind>().is_err());
        assert_eq!("confidence".parse::<CriticKind>().unwrap(), CriticKind::Confidence);
    }

    #[test]
    fn critic_std_within_bounds() {
        let agent = small_agent();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let obs: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let z = agent.critic_eval(CriticKind::Confidence, &obs, a).unwrap();
            assert!(z.mean.is_finite());
            assert!((agent.cfg.std_min..=agent.cfg.std_max).contains(&z.std));
        }
        assert!(agent.critic_eval(CriticKind::Proxy, &[0.0], [0.0, 0.0]).is_err());
    }
}
