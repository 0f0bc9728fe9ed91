//! Scripted stand-in for the human supervisor.
//!
//! [`expert_action`] is a pure-pursuit lane follower with proportional speed
//! control, a lane picker that steers around obstacles, and a hard brake when
//! the road-frame time-to-collision drops below `brake_ttc`.
//!
//! [`should_intervene`] decides whether that expert would take over from a
//! proposed agent action. Actions within `act_tolerance` of the expert's own
//! action on both axes are always tolerated; anything further off is taken
//! over. A short rollout of the proposed action on a copy of the episode
//! decides whether the takeover is recorded as a predicted crash, an
//! off-road excursion or a plain deviation.
//!
//! A live operator produces the same [`InterventionRecord`] shape.

use serde::{Deserialize, Serialize};

use crate::agent::Action;
use crate::env::{Done, Env};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Pure-pursuit lookahead distance (m).
    pub lookahead: f64,
    pub cruise_speed: f64,
    /// Time-to-collision below which the expert brakes fully (s).
    pub brake_ttc: f64,
    /// Largest per-axis deviation from the expert action tolerated.
    pub act_tolerance: f64,
    /// Rollout depth, in steps, for danger prediction.
    pub horizon: u32,
    /// Proportional speed gain (1/s).
    pub speed_gain: f64,
    /// Lateral clearance a lane needs to count as free (m).
    pub clearance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            lookahead: 6.0,
            cruise_speed: 7.0,
            brake_ttc: 1.5,
            act_tolerance: 0.6,
            horizon: 10,
            speed_gain: 0.5,
            clearance: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionReason {
    PredictedCrash,
    OffRoad,
    Deviation,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub intervened: bool,
    pub a_h: Option<Action>,
    pub reason: InterventionReason,
}

impl InterventionRecord {
    pub fn none() -> Self {
        Self {
            intervened: false,
            a_h: None,
            reason: InterventionReason::None,
        }
    }

    pub fn takeover(a_h: Action, reason: InterventionReason) -> Self {
        Self {
            intervened: true,
            a_h: Some(a_h),
            reason,
        }
    }
}

/// Obstacles around the ego in road coordinates: `(ds, lateral, radius, speed)`.
fn nearby(env: &Env, behind: f64, ahead: f64) -> Vec<(f64, f64, f64, f64)> {
    let sc = env.scenario();
    let t = env.time();
    (0..sc.obstacles.len())
        .filter_map(|k| {
            let s = sc.obstacle_arc(k, t)?;
            let ds = s - env.progress();
            let o = &sc.obstacles[k];
            (ds >= -behind && ds <= ahead).then_some((ds, o.lateral, o.radius, o.speed))
        })
        .collect()
}

/// Moving traffic can be followed, so a lane it occupies scores as if the
/// blockage were this much further away.
const FOLLOW_BONUS: f64 = 30.0;

/// Lateral offset the expert aims for.
///
/// Each candidate lane (centre, left, right) is scored by the distance to the
/// first obstacle that leaves it less than `clearance`; obstacles count until
/// the ego is fully past them. The centre wins whenever it is free, otherwise
/// the lane that stays free the longest, ties going to the nearer lane.
pub fn target_lateral(env: &Env, cfg: &ExpertConfig) -> f64 {
    let lane = env.cfg().lane_offset;
    let ego_r = env.cfg().ego_radius;
    let obs = nearby(env, 2.0 * ego_r + 4.0, 25.0);
    let blocked_at = |c: f64| {
        obs.iter()
            .filter(|&&(ds, lat, r, _)| (c - lat).abs() - r - ego_r < cfg.clearance && ds > -(r + ego_r + 2.0))
            .map(|&(ds, _, _, speed)| if speed > 0.0 { ds + FOLLOW_BONUS } else { ds })
            .fold(f64::INFINITY, f64::min)
    };
    let centre = blocked_at(0.0);
    if centre == f64::INFINITY {
        return 0.0;
    }
    let cur = env.lateral();
    let mut best = (centre, cur.abs(), 0.0);
    for c in [lane, -lane] {
        let free = blocked_at(c);
        let dist = (c - cur).abs();
        if free > best.0 || (free == best.0 && dist < best.1) {
            best = (free, dist, c);
        }
    }
    best.2
}

/// Smallest time-to-collision with an obstacle in the ego's lateral corridor.
pub fn min_ttc(env: &Env) -> f64 {
    let ego_r = env.cfg().ego_radius;
    let v = env.ego().speed * env.heading_error().cos();
    let lat = env.lateral();
    nearby(env, 0.0, env.cfg().r_max)
        .into_iter()
        .filter(|&(_, olat, r, _)| (olat - lat).abs() < r + ego_r + 0.3)
        .map(|(ds, _, r, speed)| {
            let gap = ds - r - ego_r;
            let closing = v - speed;
            if gap <= 0.0 {
                0.0
            } else if closing > 0.0 {
                gap / closing
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Pure-pursuit steering angle (rad) toward road coordinates
/// `(progress + lookahead, lateral)`.
pub fn pursuit_steering(env: &Env, lookahead: f64, lateral: f64) -> f64 {
    let target = env.scenario().pose_at(env.progress() + lookahead, lateral);
    let e = env.ego();
    let (dx, dy) = (target[0] - e.position[0], target[1] - e.position[1]);
    let (sin_h, cos_h) = e.heading.sin_cos();
    let fx = cos_h * dx + sin_h * dy;
    let fy = -sin_h * dx + cos_h * dy;
    let ld2 = fx * fx + fy * fy;
    if ld2 < 1e-9 {
        return 0.0;
    }
    (env.cfg().wheelbase * 2.0 * fy / ld2).atan()
}

/// Speed the expert aims for: cruise, capped by a gap rule for every
/// obstacle ahead in the band swept between the current and target lateral.
/// When sidestepping a static obstacle it keeps creeping so the steering can
/// take effect.
pub fn target_speed(env: &Env, cfg: &ExpertConfig, target_lat: f64) -> f64 {
    let ego_r = env.cfg().ego_radius;
    let cur = env.lateral();
    let sidestep = (target_lat - cur).abs() > 0.5;
    let mut v = cfg.cruise_speed;
    for (ds, lat, r, speed) in nearby(env, 0.0, env.cfg().r_max) {
        let m = r + ego_r + 0.3;
        if ds <= 0.0 || lat < cur.min(target_lat) - m || lat > cur.max(target_lat) + m {
            continue;
        }
        let gap = ds - r - ego_r;
        let mut allow = speed + 0.8 * (gap - 3.0);
        if speed == 0.0 && sidestep && gap > 0.5 {
            allow = allow.max(1.0);
        }
        v = v.min(allow.max(0.0));
    }
    v
}

/// Scripted driving action in `[-1, 1]^2`.
pub fn expert_action(env: &Env, cfg: &ExpertConfig) -> Action {
    let c = env.cfg();
    let lat = target_lateral(env, cfg);
    let steer = (pursuit_steering(env, cfg.lookahead, lat) / c.steer_max).clamp(-1.0, 1.0);
    let accel = if min_ttc(env) < cfg.brake_ttc {
        -1.0
    } else {
        let dv = target_speed(env, cfg, lat) - env.ego().speed;
        if dv >= 0.0 {
            cfg.speed_gain * dv / c.accel_max
        } else {
            dv / -c.accel_min
        }
    };
    [accel.clamp(-1.0, 1.0), steer]
}

/// Outcome of holding `action` for `horizon` steps on a copy of `env`.
pub fn rollout_outcome(env: &Env, action: Action, horizon: u32) -> InterventionReason {
    let mut sim = env.clone();
    for _ in 0..horizon {
        match sim.step_core(action) {
            Ok((_, _, done, info)) => {
                if info.collision {
                    return InterventionReason::PredictedCrash;
                }
                if done == Done::OutOfRoad {
                    return InterventionReason::OffRoad;
                }
                if done.is_terminal() {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    InterventionReason::None
}

pub fn should_intervene(env: &Env, a_g: Action, cfg: &ExpertConfig) -> InterventionRecord {
    if env.status().is_terminal() {
        return InterventionRecord::none();
    }
    let a_e = expert_action(env, cfg);
    let deviation = (a_g[0] - a_e[0]).abs().max((a_g[1] - a_e[1]).abs());
    if deviation <= cfg.act_tolerance {
        return InterventionRecord::none();
    }
    match rollout_outcome(env, a_g, cfg.horizon) {
        InterventionReason::None => InterventionRecord::takeover(a_e, InterventionReason::Deviation),
        reason => InterventionRecord::takeover(a_e, reason),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EgoState, EnvConfig};

    fn straight_env() -> Env {
        // seed whose first segment is a long straight along +x
        let cfg = EnvConfig {
            obstacle_free: true,
            ..EnvConfig::default()
        };
        Env::from_seed(1, cfg)
    }

    #[test]
    fn equilibrium_on_clear_straight() {
        let env = straight_env().with_ego(EgoState {
            position: [10.0, 0.0],
            heading: 0.0,
            speed: 7.0,
            steering_angle: 0.0,
        });
        let a = expert_action(&env, &ExpertConfig::default());
        assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-9, "{a:?}");
    }

    #[test]
    fn own_action_is_never_overridden() {
        let cfg = ExpertConfig::default();
        for seed in 0..20 {
            let mut env = Env::from_seed(seed, EnvConfig::default());
            for _ in 0..150 {
                let a = expert_action(&env, &cfg);
                assert!(!should_intervene(&env, a, &cfg).intervened);
                if env.step(a).unwrap().done.is_terminal() {
                    break;
                }
            }
        }
    }

    #[test]
    fn throttle_into_obstacle_is_predicted_crash() {
        let env_cfg = EnvConfig::default();
        let base = Env::from_seed(4, env_cfg);
        let sc = base.scenario().clone();
        let o = sc.obstacles[0];
        let s = o.s0 - o.radius - 1.0 - 6.0;
        let p = sc.pose_at(s, o.lateral);
        let env = base.with_ego(EgoState {
            position: p,
            heading: sc.heading_at(s),
            speed: 8.0,
            steering_angle: 0.0,
        });
        let rec = should_intervene(&env, [1.0, 0.0], &ExpertConfig::default());
        assert!(rec.intervened);
        assert_eq!(rec.reason, InterventionReason::PredictedCrash);
        assert_eq!(rec.a_h.unwrap()[0], -1.0);
    }
}
