//! Stage-1 learner: learning from takeovers without reward.
//!
//! `Z^g` is fitted to proxy values (`+1` on the supervisor's action, `-1` on
//! the action the agent proposed) and to reward-free temporal differences that
//! carry those labels through the dynamics. `pi^g` ascends `Z^g`. `Z^c`
//! learns the ordinary rewarded return of the same behaviour so the confidence
//! switch has a reward-grounded critic once stage 2 starts.
//!
//! An update is split into a [`Stage1Plan`] (every sampled index and noise
//! draw) and a pure [`apply_stage1`], so a single step can be replayed against
//! an independent implementation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{critic_batch, draw_noise, policy_heads, policy_improvement, Action, AgentError, AgentParams};
use crate::buffer::{ReplayBuffers, Transition};
use crate::dist::{clip_target, pv_grads, reward_free_target, rewarded_target, td_grads, ProxyTarget};
use crate::nn::{Adam, GradSet, Matrix, NnError, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dist(#[from] crate::dist::DistError),
    #[error("self-learning policy initialised before stage 1 produced any update")]
    NotReady,
}

pub type Result<T> = std::result::Result<T, LearnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub gamma: f64,
    /// Scale on the std path of every distributional gradient.
    pub eta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub lr_critic: f64,
    pub lr_policy: f64,
    pub lr_alpha: f64,
    /// TD targets are clamped to the target critic's mean +- `td_clip` stds.
    pub td_clip: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            eta: 0.1,
            tau: 0.005,
            batch_size: 128,
            lr_critic: 3e-4,
            lr_policy: 1e-4,
            lr_alpha: 3e-4,
            td_clip: 3.0,
        }
    }
}

/// Adam state for each trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptim {
    pub pi_g: Adam,
    pub pi_r: Adam,
    pub z_g: Adam,
    pub z_c: Adam,
}

impl AgentOptim {
    pub fn new(agent: &AgentParams, cfg: &LearnerConfig) -> Self {
        Self {
            pi_g: Adam::new(&agent.pi_g, cfg.lr_policy),
            pi_r: Adam::new(&agent.pi_r, cfg.lr_policy),
            z_g: Adam::new(&agent.z_g, cfg.lr_critic),
            z_c: Adam::new(&agent.z_c, cfg.lr_critic),
        }
    }
}

/// A takeover pair for the proxy-value loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PvItem {
    pub obs: Vec<f64>,
    pub a_h: Action,
    pub a_g: Action,
}

/// A reward-free TD sample with its pre-drawn noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TdItem {
    pub obs: Vec<f64>,
    pub action: Action,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Reparameterisation noise for the next action.
    pub next_eps: Action,
    /// Standard-normal draw for the sampled next return.
    pub z_eps: f64,
}

impl TdItem {
    fn from_transition<R: Rng + ?Sized>(t: &Transition, rng: &mut R) -> Self {
        let next_eps = draw_noise(rng);
        let z_eps = draw_noise(rng)[0];
        Self {
            obs: t.obs.clone(),
            action: t.executed(),
            next_obs: t.next_obs.clone(),
            done: t.done,
            next_eps,
            z_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardedItem {
    pub td: TdItem,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyItem {
    pub obs: Vec<f64>,
    pub eps: Action,
}

/// Everything random about one stage-1 update, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Plan {
    pub pv: Vec<PvItem>,
    pub td: Vec<TdItem>,
    pub zc: Vec<RewardedItem>,
    pub pi: Vec<PolicyItem>,
}

/// Diagnostics from one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateReport {
    pub zg_grad_norm: f64,
    pub zc_grad_norm: f64,
    pub pi_grad_norm: f64,
    /// Mean `Z^c` std over the update batch, before the step.
    pub sigma_mean_c: f64,
    /// Mean `Z^g` std over the TD batch, before the step.
    pub sigma_mean_g: f64,
    pub mean_q: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub pv_used: bool,
}

fn sample_transitions<'a, R: Rng + ?Sized>(buf: &'a crate::buffer::RingBuffer<Transition>, n: usize, rng: &mut R) -> Vec<&'a Transition> {
    buf.sample_indices(n, rng).into_iter().map(|i| &buf.items()[i]).collect()
}

/// Draws a stage-1 update: half the TD batch from each buffer when the human
/// buffer is non-empty, proxy-value pairs from the human buffer, and a full
/// novice batch for `Z^c`. The policy is improved on the TD batch states.
pub fn plan_stage1<R: Rng + ?Sized>(buffers: &ReplayBuffers, batch: usize, rng: &mut R) -> Result<Stage1Plan> {
    if buffers.novice.is_empty() || batch == 0 {
        return Err(LearnError::EmptyBuffer);
    }
    let half = (batch / 2).max(1);
    let mut pv = Vec::new();
    if buffers.human.is_empty() {
        log::debug!("human buffer empty; proxy-value term skipped");
    } else {
        for t in sample_transitions(&buffers.human, half, rng) {
            pv.push(PvItem {
                obs: t.obs.clone(),
                a_h: t.a_h.expect("human buffer holds intervened transitions"),
                a_g: t.a_g,
            });
        }
    }
    let picks: Vec<&Transition> = if buffers.human.is_empty() {
        sample_transitions(&buffers.novice, batch, rng)
    } else {
        let mut v = sample_transitions(&buffers.novice, batch - half, rng);
        v.extend(sample_transitions(&buffers.human, half, rng));
        v
    };
    let td: Vec<TdItem> = picks.iter().map(|t| TdItem::from_transition(t, rng)).collect();
    let zc = plan_rewarded(buffers, batch, rng);
    let pi = td
        .iter()
        .map(|t| PolicyItem {
            obs: t.obs.clone(),
            eps: draw_noise(rng),
        })
        .collect();
    Ok(Stage1Plan { pv, td, zc, pi })
}

pub(crate) fn plan_rewarded<R: Rng + ?Sized>(buffers: &ReplayBuffers, batch: usize, rng: &mut R) -> Vec<RewardedItem> {
    sample_transitions(&buffers.novice, batch, rng)
        .into_iter()
        .map(|t| RewardedItem {
            td: TdItem::from_transition(t, rng),
            reward: t.reward,
        })
        .collect()
}

fn rows<'a>(it: impl Iterator<Item = &'a [f64]>) -> Matrix {
    let v: Vec<&[f64]> = it.collect();
    Matrix::from_rows(&v)
}

fn critic_rows<'a>(it: impl Iterator<Item = (&'a [f64], &'a Action)>) -> Matrix {
    let v: Vec<Vec<f64>> = it.map(|(o, a)| crate::agent::critic_input(o, a)).collect();
    Matrix::from_rows(&v)
}

/// Networks a TD pass reads.
pub(crate) struct TdNets<'a> {
    pub critic: &'a ParamSet,
    pub critic_target: &'a ParamSet,
    pub policy_target: &'a ParamSet,
}

/// Accumulates `weight * dL/dtheta` of the TD loss into `grads` and returns
/// the batch mean of the online critic std.
///
/// `rewards` is `None` for the reward-free critic: that path has no access to
/// any reward value.
pub(crate) fn td_accumulate(
    nets: TdNets<'_>,
    items: &[TdItem],
    rewards: Option<&[f64]>,
    agent: &AgentParams,
    cfg: &LearnerConfig,
    weight: f64,
    grads: &mut GradSet,
) -> Result<f64> {
    let n = items.len();
    if n == 0 {
        return Ok(f64::NAN);
    }
    let (lo, hi) = (agent.cfg.std_min, agent.cfg.std_max);
    let alpha = agent.alpha();

    let next_tape = nets.policy_target.forward_batch(rows(items.iter().map(|t| t.next_obs.as_slice())))?;
    let next: Vec<_> = policy_heads(&next_tape).iter().zip(items).map(|(h, t)| h.sample_with(t.next_eps)).collect();
    let (_, z_next, _) = critic_batch(nets.critic_target, critic_rows(items.iter().zip(&next).map(|(t, s)| (t.next_obs.as_slice(), &s.action))), lo, hi)?;
    let sa = critic_rows(items.iter().map(|t| (t.obs.as_slice(), &t.action)));
    let (_, z_bar, _) = critic_batch(nets.critic_target, sa.clone(), lo, hi)?;
    let (tape, z, dstd) = critic_batch(nets.critic, sa, lo, hi)?;

    let mut adj = Matrix::zeros(n, 2);
    let mut std_sum = 0.0;
    for i in 0..n {
        let t = &items[i];
        let z_sample = z_next[i].sample_with(t.z_eps);
        let y = match (rewards, t.done) {
            (None, true) => 0.0,
            (None, false) => reward_free_target(z_sample, next[i].log_prob, alpha, cfg.gamma),
            (Some(r), true) => r[i],
            (Some(r), false) => rewarded_target(r[i], z_sample, next[i].log_prob, alpha, cfg.gamma),
        };
        let y = clip_target(y, z_bar[i], cfg.td_clip);
        let g = td_grads(y, z[i], cfg.eta)?;
        let row = adj.row_mut(i);
        row[0] = weight * g.d_mean;
        row[1] = weight * g.d_std * dstd[i];
        std_sum += z[i].std;
    }
    nets.critic.backward_batch(&tape, &adj, grads)?;
    Ok(std_sum / n as f64)
}

/// Accumulates `weight * dL/dtheta` of the proxy-value loss over both labels.
pub(crate) fn pv_accumulate(critic: &ParamSet, items: &[PvItem], agent: &AgentParams, cfg: &LearnerConfig, weight: f64, grads: &mut GradSet) -> Result<()> {
    if items.is_empty() {
        return Ok(());
    }
    let inputs = critic_rows(items.iter().flat_map(|p| [(p.obs.as_slice(), &p.a_h), (p.obs.as_slice(), &p.a_g)]));
    let (tape, z, dstd) = critic_batch(critic, inputs, agent.cfg.std_min, agent.cfg.std_max)?;
    let mut adj = Matrix::zeros(z.len(), 2);
    for (r, zr) in z.iter().enumerate() {
        let label = if r % 2 == 0 { ProxyTarget::Human } else { ProxyTarget::Novice };
        let g = pv_grads(label, *zr, cfg.eta)?;
        let row = adj.row_mut(r);
        row[0] = weight * g.d_mean;
        row[1] = weight * g.d_std * dstd[r];
    }
    critic.backward_batch(&tape, &adj, grads)?;
    Ok(())
}

/// Policy step on `critic`, returning the batch log-probabilities and report
/// fields.
pub(crate) fn policy_step(
    policy: &mut ParamSet,
    opt: &mut Adam,
    critic: &ParamSet,
    items: &[PolicyItem],
    agent_cfg: &crate::agent::AgentConfig,
    alpha: f64,
) -> Result<(Vec<f64>, f64, f64, f64)> {
    let obs = rows(items.iter().map(|p| p.obs.as_slice()));
    let eps: Vec<Action> = items.iter().map(|p| p.eps).collect();
    let imp = policy_improvement(policy, critic, &obs, &eps, alpha, agent_cfg.std_min, agent_cfg.std_max)?;
    let norm = imp.grads.norm();
    opt.step(policy, &imp.grads)?;
    let logps = imp.samples.iter().map(|s| s.log_prob).collect();
    Ok((logps, norm, imp.mean_q, imp.loss))
}

/// One stage-1 update: `Z^g`, then `Z^c`, then `pi^g` on the updated `Z^g`,
/// then the temperature, then the target blends.
pub fn apply_stage1(agent: &mut AgentParams, optim: &mut AgentOptim, cfg: &LearnerConfig, plan: &Stage1Plan) -> Result<UpdateReport> {
    if plan.td.is_empty() || plan.pi.is_empty() {
        return Err(LearnError::EmptyBuffer);
    }
    let mut g_zg = agent.z_g.zero_grads();
    pv_accumulate(&agent.z_g, &plan.pv, agent, cfg, 1.0 / plan.pv.len().max(1) as f64, &mut g_zg)?;
    let nets = TdNets {
        critic: &agent.z_g,
        critic_target: &agent.z_g_target,
        policy_target: &agent.pi_g_target,
    };
    let sigma_g = td_accumulate(nets, &plan.td, None, agent, cfg, 1.0 / plan.td.len() as f64, &mut g_zg)?;

    let mut g_zc = agent.z_c.zero_grads();
    let rewards: Vec<f64> = plan.zc.iter().map(|r| r.reward).collect();
    let zc_items: Vec<TdItem> = plan.zc.iter().map(|r| r.td.clone()).collect();
    let nets = TdNets {
        critic: &agent.z_c,
        critic_target: &agent.z_c_target,
        policy_target: &agent.pi_g_target,
    };
    let sigma_c = td_accumulate(nets, &zc_items, Some(&rewards), agent, cfg, 1.0 / zc_items.len().max(1) as f64, &mut g_zc)?;

    optim.z_g.step(&mut agent.z_g, &g_zg)?;
    if !zc_items.is_empty() {
        optim.z_c.step(&mut agent.z_c, &g_zc)?;
    }

    let alpha = agent.alpha();
    let (logps, pi_norm, mean_q, loss) = policy_step(&mut agent.pi_g, &mut optim.pi_g, &agent.z_g, &plan.pi, &agent.cfg, alpha)?;
    agent.temperature_update(&logps, cfg.lr_alpha)?;

    agent.z_g_target.polyak_blend(&agent.z_g, cfg.tau)?;
    agent.z_c_target.polyak_blend(&agent.z_c, cfg.tau)?;
    agent.pi_g_target.polyak_blend(&agent.pi_g, cfg.tau)?;

    Ok(UpdateReport {
        zg_grad_norm: g_zg.norm(),
        zc_grad_norm: g_zc.norm(),
        pi_grad_norm: pi_norm,
        sigma_mean_c: sigma_c,
        sigma_mean_g: sigma_g,
        mean_q,
        policy_loss: loss,
        entropy: -logps.iter().sum::<f64>() / logps.len() as f64,
        alpha: agent.alpha(),
        pv_used: !plan.pv.is_empty(),
    })
}

/// Draws and applies one stage-1 update.
pub fn dpvp_update<R: Rng + ?Sized>(buffers: &ReplayBuffers, agent: &mut AgentParams, optim: &mut AgentOptim, cfg: &LearnerConfig, rng: &mut R) -> Result<UpdateReport> {
    let plan = plan_stage1(buffers, cfg.batch_size, rng)?;
    apply_stage1(agent, optim, cfg, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (AgentParams, AgentOptim, LearnerConfig) {
        let agent = AgentParams::new(AgentConfig {
            obs_dim: 3,
            hidden: vec![8],
            seed: 2,
            ..AgentConfig::default()
        });
        let cfg = LearnerConfig {
            batch_size: 8,
            ..LearnerConfig::default()
        };
        let optim = AgentOptim::new(&agent, &cfg);
        (agent, optim, cfg)
    }

    fn buffers(reward: f64) -> ReplayBuffers {
        let mut b = ReplayBuffers::new(64, 16);
        for i in 0..12 {
            let x = i as f64 * 0.1;
            b.record(Transition {
                obs: vec![x, -x, 0.5],
                a_g: [0.3, -0.2],
                a_h: (i % 3 == 0).then_some([-0.4, 0.1]),
                reward: reward * x,
                next_obs: vec![x + 0.1, -x, 0.5],
                done: i == 11,
            });
        }
        b
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let (mut a, mut o, cfg) = tiny();
        let b = ReplayBuffers::new(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(dpvp_update(&b, &mut a, &mut o, &cfg, &mut rng), Err(LearnError::EmptyBuffer)));
    }

    #[test]
    fn equal_seeds_give_equal_reports() {
        let run = || {
            let (mut a, mut o, cfg) = tiny();
            let b = buffers(1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..5).map(|_| dpvp_update(&b, &mut a, &mut o, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn proxy_critic_ignores_rewards() {
        let run = |reward: f64| {
            let (mut a, mut o, cfg) = tiny();
            let b = buffers(reward);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..5 {
                dpvp_update(&b, &mut a, &mut o, &cfg, &mut rng).unwrap();
            }
            (a.z_g.flatten(), a.z_c.flatten())
        };
        let (zg1, zc1) = run(1.0);
        let (zg2, zc2) = run(-40.0);
        assert_eq!(zg1, zg2);
        assert_ne!(zc1, zc2);
    }
}
