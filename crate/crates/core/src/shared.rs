//! Stage-2 learner: reward-driven improvement behind a confidence switch.
//!
//! `pi^r` starts as a copy of `pi^g` and is trained on `Z^c` from reward.
//! At every step both policies propose their mean action, `Z^c` scores the
//! two, and the self-learning action is used only when the probability that
//! it returns more clears `1 - delta`. `pi^g` and `Z^g` stay frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::agent::{draw_noise, ActionSample, Action, AgentParams, CriticKind, PolicyKind};
use crate::buffer::ReplayBuffers;
use crate::dist::{confidence_probability, intervene, DistError, SwitchConfig};
use crate::dpvp::{plan_rewarded, policy_step, td_accumulate, AgentOptim, LearnError, LearnerConfig, PolicyItem, Result, RewardedItem, TdItem, TdNets, UpdateReport};
use crate::nn::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    Full,
    /// Plain mean comparison: the switch behaves as if `delta = 0.5`.
    NoConfidence,
    /// No fallback: the self-learning policy always acts.
    NoShare,
}

impl FromStr for ShareMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(ShareMode::Full),
            "no_confidence" => Ok(ShareMode::NoConfidence),
            "no_share" => Ok(ShareMode::NoShare),
            _ => Err(format!("unknown share mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShareConfig {
    pub switch: SwitchConfig,
    pub mode: ShareMode,
}

impl ShareConfig {
    pub fn new(delta: f64, std_max: f64, mode: ShareMode) -> std::result::Result<Self, DistError> {
        Ok(Self {
            switch: SwitchConfig::new(delta, std_max)?,
            mode,
        })
    }

    /// Switch parameters in force for this mode.
    pub fn effective(&self) -> SwitchConfig {
        match self.mode {
            ShareMode::NoConfidence => SwitchConfig {
                delta: 0.5,
                ..self.switch
            },
            _ => self.switch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub q_g: f64,
    pub sigma_g: f64,
    pub q_r: f64,
    pub sigma_r: f64,
    pub p: f64,
    pub chose_human_guided: bool,
}

/// Copies `pi^g` (and its target) into `pi^r` and resets the `pi^r`
/// optimizer. Fails if `pi^g` has never been updated.
pub fn init_self_policy(agent: &mut AgentParams, optim: &mut AgentOptim) -> Result<()> {
    if optim.pi_g.step == 0 {
        return Err(LearnError::NotReady);
    }
    // Weights only: each network keeps its own init seed.
    agent.pi_r.layers_mut().clone_from_slice(agent.pi_g.layers());
    agent.pi_r_target.layers_mut().clone_from_slice(agent.pi_g.layers());
    optim.pi_r = Adam::new(&agent.pi_r, optim.pi_r.lr);
    Ok(())
}

/// Scores both policies' mean actions on `Z^c` and applies the switch.
/// Returns the report and the two mean actions `(a_g, a_r)`.
pub fn confidence_report(obs: &[f64], agent: &AgentParams, cfg: &ShareConfig) -> Result<(ConfidenceReport, Action, Action)> {
    let a_g = agent.mean_action(PolicyKind::Guided, obs)?;
    let a_r = agent.mean_action(PolicyKind::SelfLearning, obs)?;
    let zg = agent.critic_eval(CriticKind::Confidence, obs, a_g)?;
    let zr = agent.critic_eval(CriticKind::Confidence, obs, a_r)?;
    let p = confidence_probability(zr, zg)?;
    let chose_human_guided = match cfg.mode {
        ShareMode::NoShare => false,
        _ => intervene(p, &cfg.effective()),
    };
    let report = ConfidenceReport {
        q_g: zg.mean,
        sigma_g: zg.std,
        q_r: zr.mean,
        sigma_r: zr.std,
        p,
        chose_human_guided,
    };
    Ok((report, a_g, a_r))
}

/// Stochastic action from whichever policy the switch picks.
pub fn select_action_shared<R: Rng + ?Sized>(obs: &[f64], agent: &AgentParams, cfg: &ShareConfig, rng: &mut R) -> Result<(ActionSample, ConfidenceReport)> {
    let (report, _, _) = confidence_report(obs, agent, cfg)?;
    let kind = if report.chose_human_guided { PolicyKind::Guided } else { PolicyKind::SelfLearning };
    let sample = agent.head(kind, obs)?.sample_with(draw_noise(rng));
    Ok((sample, report))
}

/// Deterministic counterpart of [`select_action_shared`].
pub fn shared_mean_action(obs: &[f64], agent: &AgentParams, cfg: &ShareConfig) -> Result<(Action, ConfidenceReport)> {
    let (report, a_g, a_r) = confidence_report(obs, agent, cfg)?;
    Ok((if report.chose_human_guided { a_g } else { a_r }, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Plan {
    pub zc: Vec<RewardedItem>,
    pub pi: Vec<PolicyItem>,
}

pub fn plan_stage2<R: Rng + ?Sized>(buffers: &ReplayBuffers, batch: usize, rng: &mut R) -> Result<Stage2Plan> {
    if buffers.novice.is_empty() || batch == 0 {
        return Err(LearnError::EmptyBuffer);
    }
    let zc = plan_rewarded(buffers, batch, rng);
    let pi = zc
        .iter()
        .map(|r| PolicyItem {
            obs: r.td.obs.clone(),
            eps: draw_noise(rng),
        })
        .collect();
    Ok(Stage2Plan { zc, pi })
}

/// One stage-2 update: `Z^c` with next actions from the `pi^r` target, then
/// `pi^r` on the updated `Z^c`, then the temperature and target blends.
pub fn apply_stage2(agent: &mut AgentParams, optim: &mut AgentOptim, cfg: &LearnerConfig, plan: &Stage2Plan) -> Result<UpdateReport> {
    if plan.zc.is_empty() || plan.pi.is_empty() {
        return Err(LearnError::EmptyBuffer);
    }
    let rewards: Vec<f64> = plan.zc.iter().map(|r| r.reward).collect();
    let items: Vec<TdItem> = plan.zc.iter().map(|r| r.td.clone()).collect();
    let mut g_zc = agent.z_c.zero_grads();
    let nets = TdNets {
        critic: &agent.z_c,
        critic_target: &agent.z_c_target,
        policy_target: &agent.pi_r_target,
    };
    let sigma_c = td_accumulate(nets, &items, Some(&rewards), agent, cfg, 1.0 / items.len() as f64, &mut g_zc)?;
    optim.z_c.step(&mut agent.z_c, &g_zc)?;

    let alpha = agent.alpha();
    let (logps, pi_norm, mean_q, loss) = policy_step(&mut agent.pi_r, &mut optim.pi_r, &agent.z_c, &plan.pi, &agent.cfg, alpha)?;
    agent.temperature_update(&logps, cfg.lr_alpha)?;

    agent.z_c_target.polyak_blend(&agent.z_c, cfg.tau)?;
    agent.pi_r_target.polyak_blend(&agent.pi_r, cfg.tau)?;

    Ok(UpdateReport {
        zg_grad_norm: 0.0,
        zc_grad_norm: g_zc.norm(),
        pi_grad_norm: pi_norm,
        sigma_mean_c: sigma_c,
        sigma_mean_g: f64::NAN,
        mean_q,
        policy_loss: loss,
        entropy: -logps.iter().sum::<f64>() / logps.len() as f64,
        alpha: agent.alpha(),
        pv_used: false,
    })
}

pub fn shared_update<R: Rng + ?Sized>(buffers: &ReplayBuffers, agent: &mut AgentParams, optim: &mut AgentOptim, cfg: &LearnerConfig, rng: &mut R) -> Result<UpdateReport> {
    let plan = plan_stage2(buffers, cfg.batch_size, rng)?;
    apply_stage2(agent, optim, cfg, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::buffer::Transition;
    use crate::dpvp::dpvp_update;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (AgentParams, AgentOptim, LearnerConfig, ReplayBuffers) {
        let agent = AgentParams::new(AgentConfig {
            obs_dim: 3,
            hidden: vec![8],
            seed: 7,
            ..AgentConfig::default()
        });
        let cfg = LearnerConfig {
            batch_size: 8,
            ..LearnerConfig::default()
        };
        let optim = AgentOptim::new(&agent, &cfg);
        let mut b = ReplayBuffers::new(32, 8);
        for i in 0..10 {
            let x = i as f64 / 10.0;
            b.record(Transition {
                obs: vec![x, 1.0 - x, 0.0],
                a_g: [0.1, 0.0],
                a_h: (i % 2 == 0).then_some([0.5, 0.0]),
                reward: x,
                next_obs: vec![x + 0.1, 0.9 - x, 0.0],
                done: false,
            });
        }
        (agent, optim, cfg, b)
    }

    #[test]
    fn init_requires_stage_one() {
        let (mut a, mut o, cfg, b) = setup();
        assert!(matches!(init_self_policy(&mut a, &mut o), Err(LearnError::NotReady)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        dpvp_update(&b, &mut a, &mut o, &cfg, &mut rng).unwrap();
        init_self_policy(&mut a, &mut o).unwrap();
        assert_eq!(a.pi_r.flatten(), a.pi_g.flatten());
        let obs = [0.3, -0.2, 0.1];
        assert_eq!(a.mean_action(PolicyKind::Guided, &obs).unwrap(), a.mean_action(PolicyKind::SelfLearning, &obs).unwrap());
        let (rep, _, _) = confidence_report(&obs, &a, &ShareConfig::new(0.15, 10.0, ShareMode::Full).unwrap()).unwrap();
        assert_eq!(rep.p, 0.5);
        assert!(rep.chose_human_guided);
    }

    #[test]
    fn frozen_networks_stay_put() {
        let (mut a, mut o, cfg, b) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        dpvp_update(&b, &mut a, &mut o, &cfg, &mut rng).unwrap();
        init_self_policy(&mut a, &mut o).unwrap();
        let (pg, zg) = (a.pi_g.checksum(), a.z_g.checksum());
        for _ in 0..50 {
            shared_update(&b, &mut a, &mut o, &cfg, &mut rng).unwrap();
        }
        assert_eq!((a.pi_g.checksum(), a.z_g.checksum()), (pg, zg));
        assert_ne!(a.pi_r.checksum(), pg);
    }

    #[test]
    fn no_share_never_falls_back() {
        let (a, _, _, _) = setup();
        let cfg = ShareConfig::new(0.15, 10.0, ShareMode::NoShare).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..50 {
            let obs = [i as f64 * 0.1, 0.0, -1.0];
            assert!(!select_action_shared(&obs, &a, &cfg, &mut rng).unwrap().1.chose_human_guided);
        }
    }
}
