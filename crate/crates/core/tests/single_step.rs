//! One full update on tiny networks against a scripted forward-mode replica.

mod common;

use common::*;
use handover::agent::{AgentConfig, AgentParams};
use handover::buffer::{ReplayBuffers, Transition};
use handover::dpvp::{apply_stage1, dpvp_update, plan_stage1, AgentOptim, LearnerConfig, TdItem};
use handover::nn::Adam;
use handover::shared::{apply_stage2, init_self_policy, plan_stage2, shared_update};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn setup(seed: u64) -> (AgentParams, AgentOptim, LearnerConfig, ReplayBuffers) {
    let agent = AgentParams::new(AgentConfig {
        obs_dim: 2,
        hidden: vec![2],
        seed,
        ..AgentConfig::default()
    });
    let cfg = LearnerConfig {
        batch_size: 4,
        lr_critic: 1e-2,
        lr_policy: 1e-2,
        lr_alpha: 1e-2,
        tau: 0.1,
        ..LearnerConfig::default()
    };
    let optim = AgentOptim::new(&agent, &cfg);
    let mut b = ReplayBuffers::new(1, 1);
    b.record(Transition {
        obs: vec![0.3, -0.7],
        a_g: [-0.2, 0.4],
        a_h: Some([0.6, -0.1]),
        reward: 0.8,
        next_obs: vec![0.35, -0.6],
        done: false,
    });
    (agent, optim, cfg, b)
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

struct Ctx {
    lo: f64,
    hi: f64,
    alpha: f64,
    gamma: f64,
    clip: f64,
    eta: f64,
}

/// Clipped TD target for one item from the target nets.
fn td_target(c: &Ctx, pol_t: &Mlp, crit_t: &Mlp, t: &TdItem, reward: Option<f64>) -> f64 {
    let (a, lp) = squashed_sample(&pol_t.forward_d(&consts(&t.next_obs), None), t.next_eps);
    let zin: Vec<D> = consts(&t.next_obs).into_iter().chain(a).collect();
    let (m, s) = critic_head(&crit_t.forward_d(&zin, None), c.lo, c.hi);
    let boot = c.gamma * (m.v + s.v * t.z_eps - c.alpha * lp.v);
    let y = match (reward, t.done) {
        (None, true) => 0.0,
        (None, false) => boot,
        (Some(r), true) => r,
        (Some(r), false) => r + boot,
    };
    let (mb, sb) = critic_head(&consts(&crit_t.forward(&cat(&t.obs, &t.action))), c.lo, c.hi);
    y.clamp(mb.v - c.clip * sb.v, mb.v + c.clip * sb.v)
}

fn critic_fit(c: &Ctx, net: &Mlp, k: Option<usize>, obs: &[f64], a: [f64; 2], y: f64) -> D {
    let (m, s) = critic_head(&net.forward_d(&consts(&cat(obs, &a)), k), c.lo, c.hi);
    fit_loss(y, m, s, c.eta)
}

/// Policy loss `mean(alpha * log pi - Q)` and the pre-step log-probs.
fn policy_loss(c: &Ctx, pol: &Mlp, k: Option<usize>, critic: &Mlp, items: &[(Vec<f64>, [f64; 2])]) -> (D, Vec<f64>) {
    let mut total = D::c(0.0);
    let mut lps = Vec::new();
    for (obs, eps) in items {
        let (a, lp) = squashed_sample(&pol.forward_d(&consts(obs), k), *eps);
        let zin: Vec<D> = consts(obs).into_iter().chain(a).collect();
        let q = critic.forward_d(&zin, None)[0];
        total = total + (c.alpha * lp - q);
        lps.push(lp.v);
    }
    (total * D::c(1.0 / items.len() as f64), lps)
}

fn adam_step(net: &Mlp, g: &[f64], opt: &Adam) -> (Mlp, Vec<f64>, Vec<f64>) {
    let (mut m, mut v) = (opt.m.flatten(), opt.v.flatten());
    let p = adam(&net.p, g, &mut m, &mut v, opt.step + 1, opt.lr);
    (Mlp { sizes: net.sizes.clone(), p }, m, v)
}

fn ctx(agent: &AgentParams, cfg: &LearnerConfig) -> Ctx {
    Ctx {
        lo: agent.cfg.std_min,
        hi: agent.cfg.std_max,
        alpha: agent.alpha(),
        gamma: cfg.gamma,
        clip: cfg.td_clip,
        eta: cfg.eta,
    }
}

#[test]
fn stage_one_step_matches_replica() {
    let (mut agent, mut optim, cfg, b) = setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        dpvp_update(&b, &mut agent, &mut optim, &cfg, &mut rng).unwrap();
    }
    let plan = plan_stage1(&b, cfg.batch_size, &mut rng).unwrap();
    assert!(!plan.pv.is_empty());
    let (before, opt0) = (agent.clone(), optim.clone());
    apply_stage1(&mut agent, &mut optim, &cfg, &plan).unwrap();

    let c = ctx(&before, &cfg);
    let (zg, zc, pg) = (Mlp::of(&before.z_g), Mlp::of(&before.z_c), Mlp::of(&before.pi_g));
    let (zg_t, zc_t, pg_t) = (Mlp::of(&before.z_g_target), Mlp::of(&before.z_c_target), Mlp::of(&before.pi_g_target));

    let ys: Vec<f64> = plan.td.iter().map(|t| td_target(&c, &pg_t, &zg_t, t, None)).collect();
    let zg_loss = |net: &Mlp, k: Option<usize>| {
        let mut pv = D::c(0.0);
        for p in &plan.pv {
            pv = pv + critic_fit(&c, net, k, &p.obs, p.a_h, 1.0) + critic_fit(&c, net, k, &p.obs, p.a_g, -1.0);
        }
        let mut td = D::c(0.0);
        for (t, y) in plan.td.iter().zip(&ys) {
            td = td + critic_fit(&c, net, k, &t.obs, t.action, *y);
        }
        pv * D::c(1.0 / plan.pv.len() as f64) + td * D::c(1.0 / plan.td.len() as f64)
    };
    let (zg1, zg_m, zg_v) = adam_step(&zg, &zg.grad(zg_loss), &opt0.z_g);

    let yc: Vec<f64> = plan.zc.iter().map(|r| td_target(&c, &pg_t, &zc_t, &r.td, Some(r.reward))).collect();
    let zc_loss = |net: &Mlp, k: Option<usize>| {
        let mut s = D::c(0.0);
        for (r, y) in plan.zc.iter().zip(&yc) {
            s = s + critic_fit(&c, net, k, &r.td.obs, r.td.action, *y);
        }
        s * D::c(1.0 / plan.zc.len() as f64)
    };
    let (zc1, _, _) = adam_step(&zc, &zc.grad(zc_loss), &opt0.z_c);

    let items: Vec<(Vec<f64>, [f64; 2])> = plan.pi.iter().map(|p| (p.obs.clone(), p.eps)).collect();
    let (_, lps) = policy_loss(&c, &pg, None, &zg1, &items);
    let (pg1, pg_m, _) = adam_step(&pg, &pg.grad(|n, k| policy_loss(&c, n, k, &zg1, &items).0), &opt0.pi_g);
    let entropy = -lps.iter().sum::<f64>() / lps.len() as f64;
    let log_alpha = before.log_alpha - cfg.lr_alpha * (entropy - before.target_entropy);

    let checks = [
        ("z_g", max_gap(&agent.z_g.flatten(), &zg1.p)),
        ("z_c", max_gap(&agent.z_c.flatten(), &zc1.p)),
        ("pi_g", max_gap(&agent.pi_g.flatten(), &pg1.p)),
        ("z_g target", max_gap(&agent.z_g_target.flatten(), &blend(&zg_t.p, &zg1.p, cfg.tau))),
        ("z_c target", max_gap(&agent.z_c_target.flatten(), &blend(&zc_t.p, &zc1.p, cfg.tau))),
        ("pi_g target", max_gap(&agent.pi_g_target.flatten(), &blend(&pg_t.p, &pg1.p, cfg.tau))),
        ("z_g adam m", max_gap(&optim.z_g.m.flatten(), &zg_m)),
        ("z_g adam v", max_gap(&optim.z_g.v.flatten(), &zg_v)),
        ("pi_g adam m", max_gap(&optim.pi_g.m.flatten(), &pg_m)),
        ("log alpha", (agent.log_alpha - log_alpha).abs()),
    ];
    for (name, gap) in checks {
        assert!(gap <= TOL, "{name}: gap {gap:e}");
    }
    assert_eq!(agent.pi_r, before.pi_r);
    assert_ne!(agent.z_g, before.z_g);
}

#[test]
fn stage_two_step_matches_replica() {
    let (mut agent, mut optim, cfg, b) = setup(8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        dpvp_update(&b, &mut agent, &mut optim, &cfg, &mut rng).unwrap();
    }
    init_self_policy(&mut agent, &mut optim).unwrap();
    for _ in 0..2 {
        shared_update(&b, &mut agent, &mut optim, &cfg, &mut rng).unwrap();
    }
    let plan = plan_stage2(&b, cfg.batch_size, &mut rng).unwrap();
    let (before, opt0) = (agent.clone(), optim.clone());
    apply_stage2(&mut agent, &mut optim, &cfg, &plan).unwrap();

    let c = ctx(&before, &cfg);
    let (zc, pr) = (Mlp::of(&before.z_c), Mlp::of(&before.pi_r));
    let (zc_t, pr_t) = (Mlp::of(&before.z_c_target), Mlp::of(&before.pi_r_target));
    let yc: Vec<f64> = plan.zc.iter().map(|r| td_target(&c, &pr_t, &zc_t, &r.td, Some(r.reward))).collect();
    let zc_loss = |net: &Mlp, k: Option<usize>| {
        let mut s = D::c(0.0);
        for (r, y) in plan.zc.iter().zip(&yc) {
            s = s + critic_fit(&c, net, k, &r.td.obs, r.td.action, *y);
        }
        s * D::c(1.0 / plan.zc.len() as f64)
    };
    let (zc1, zc_m, _) = adam_step(&zc, &zc.grad(zc_loss), &opt0.z_c);
    let items: Vec<(Vec<f64>, [f64; 2])> = plan.pi.iter().map(|p| (p.obs.clone(), p.eps)).collect();
    let (_, lps) = policy_loss(&c, &pr, None, &zc1, &items);
    let (pr1, _, pr_v) = adam_step(&pr, &pr.grad(|n, k| policy_loss(&c, n, k, &zc1, &items).0), &opt0.pi_r);
    let entropy = -lps.iter().sum::<f64>() / lps.len() as f64;
    let log_alpha = before.log_alpha - cfg.lr_alpha * (entropy - before.target_entropy);

    let checks = [
        ("z_c", max_gap(&agent.z_c.flatten(), &zc1.p)),
        ("pi_r", max_gap(&agent.pi_r.flatten(), &pr1.p)),
        ("z_c target", max_gap(&agent.z_c_target.flatten(), &blend(&zc_t.p, &zc1.p, cfg.tau))),
        ("pi_r target", max_gap(&agent.pi_r_target.flatten(), &blend(&pr_t.p, &pr1.p, cfg.tau))),
        ("z_c adam m", max_gap(&optim.z_c.m.flatten(), &zc_m)),
        ("pi_r adam v", max_gap(&optim.pi_r.v.flatten(), &pr_v)),
        ("log alpha", (agent.log_alpha - log_alpha).abs()),
    ];
    for (name, gap) in checks {
        assert!(gap <= TOL, "{name}: gap {gap:e}");
    }
    for (a, b) in [(&agent.pi_g, &before.pi_g), (&agent.z_g, &before.z_g), (&agent.pi_g_target, &before.pi_g_target), (&agent.z_g_target, &before.z_g_target)] {
        assert_eq!(a, b);
    }
}
