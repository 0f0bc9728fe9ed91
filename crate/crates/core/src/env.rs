//! Desk-scale 2D driving simulator.
//!
//! A scenario is a procedurally generated road (straights, arcs and junction
//! stretches sampled into a 1 m polyline) with stationary cones and slower
//! traffic in either lane. The ego car follows kinematic-bicycle dynamics
//! integrated with explicit Euler at `dt`.
//!
//! Per-step reward is
//! `c_disp * R_disp + c_speed * R_speed + c_collision * R_collision + R_term`
//! with `R_disp` the change in arc-length progress, `R_speed = v / v_max`,
//! `R_collision = -5` while in contact with an obstacle and `R_term` equal to
//! `+10` on reaching the destination or `-5` on leaving the road. Each step in
//! contact also carries a unit safety cost; contact does not end the episode
//! unless `terminate_on_crash` is set.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Vec2 = [f64; 2];

pub const COLLISION_PENALTY: f64 = -5.0;
pub const SUCCESS_REWARD: f64 = 10.0;
pub const OUT_OF_ROAD_PENALTY: f64 = -5.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("step called on a finished episode ({0:?})")]
    Finished(Done),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_rays: usize,
    pub n_checkpoints: usize,
    pub checkpoint_spacing: f64,
    pub v_max: f64,
    pub r_max: f64,
    pub timeout: u32,
    pub dt: f64,
    pub wheelbase: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub steer_max: f64,
    pub lane_half_width: f64,
    pub lane_offset: f64,
    pub ego_radius: f64,
    pub c_disp: f64,
    pub c_speed: f64,
    pub c_collision: f64,
    pub nav_scale: f64,
    pub goal_tolerance: f64,
    pub min_obstacles: usize,
    pub max_obstacles: usize,
    pub obstacle_free: bool,
    pub terminate_on_crash: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_rays: 24,
            n_checkpoints: 5,
            checkpoint_spacing: 10.0,
            v_max: 10.0,
            r_max: 30.0,
            timeout: 1000,
            dt: 0.1,
            wheelbase: 2.5,
            accel_min: -4.0,
            accel_max: 3.0,
            steer_max: 0.5,
            lane_half_width: 5.0,
            lane_offset: 2.5,
            ego_radius: 1.0,
            c_disp: 1.0,
            c_speed: 0.1,
            c_collision: 1.0,
            nav_scale: 50.0,
            goal_tolerance: 2.0,
            min_obstacles: 2,
            max_obstacles: 4,
            obstacle_free: false,
            terminate_on_crash: false,
        }
    }
}

impl EnvConfig {
    pub fn obs_dim(&self) -> usize {
        4 + self.n_rays + 2 * self.n_checkpoints
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Straight,
    Curve,
    Junction,
}

/// Disc obstacle described in road coordinates; moves along its lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// Arc-length position at step 0.
    pub s0: f64,
    /// Signed offset from the centerline, left positive.
    pub lateral: f64,
    pub radius: f64,
    /// Speed along the road in m/s; zero for static obstacles.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub centerline: Vec<Vec2>,
    /// Tangent heading at each centerline point.
    pub headings: Vec<f64>,
    /// Arc length at each centerline point.
    pub arc: Vec<f64>,
    pub lane_half_width: f64,
    pub checkpoints: Vec<Vec2>,
    pub checkpoint_arc: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    pub destination: Vec2,
    pub segments: Vec<SegmentKind>,
}

/// Position of a point relative to the road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadPoint {
    pub s: f64,
    pub lateral: f64,
    pub heading: f64,
    pub index: usize,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI
    } else if a < -PI {
        a += 2.0 * PI
    }
    a
}

impl Scenario {
    /// Procedural scenario; a pure function of `(seed, cfg)`.
    pub fn generate(seed: u64, cfg: &EnvConfig) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_a110_d21e_0001);
        let mut segments = vec![SegmentKind::Straight];
        for _ in 0..3 {
            let u: f64 = rng.gen();
            segments.push(if u < 0.45 {
                SegmentKind::Curve
            } else if u < 0.75 {
                SegmentKind::Straight
            } else {
                SegmentKind::Junction
            });
        }
        if !segments.contains(&SegmentKind::Curve) {
            let k = rng.gen_range(1..segments.len());
            segments[k] = SegmentKind::Curve;
        }

        let mut pts: Vec<Vec2> = vec![[0.0, 0.0]];
        let mut heading = 0.0f64;
        let mut heads = vec![0.0];
        for (i, kind) in segments.iter().enumerate() {
            let (len, curvature) = match kind {
                SegmentKind::Straight if i == 0 => (rng.gen_range(35.0..45.0), 0.0),
                SegmentKind::Straight => (rng.gen_range(25.0..45.0), 0.0),
                SegmentKind::Junction => (20.0, 0.0),
                SegmentKind::Curve => {
                    let radius: f64 = rng.gen_range(30.0..60.0);
                    let angle: f64 = rng.gen_range(0.4..1.0);
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    (radius * angle, sign / radius)
                }
            };
            let n = len.ceil() as usize;
            let ds = len / n as f64;
            for _ in 0..n {
                let dh = curvature * ds;
                let mid = heading + 0.5 * dh;
                let last = pts[pts.len() - 1];
                pts.push([last[0] + ds * mid.cos(), last[1] + ds * mid.sin()]);
                heading += dh;
                heads.push(heading);
            }
        }
        let mut arc = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            arc.push(arc[arc.len() - 1] + d);
        }
        let total = arc[arc.len() - 1];

        let mut sc = Scenario {
            seed,
            destination: pts[pts.len() - 1],
            centerline: pts,
            headings: heads,
            arc,
            lane_half_width: cfg.lane_half_width,
            checkpoints: Vec::new(),
            checkpoint_arc: Vec::new(),
            obstacles: Vec::new(),
            segments,
        };
        let mut s = cfg.checkpoint_spacing;
        while s < total - 1e-9 {
            sc.checkpoints.push(sc.point_at(s));
            sc.checkpoint_arc.push(s);
            s += cfg.checkpoint_spacing;
        }
        sc.checkpoints.push(sc.destination);
        sc.checkpoint_arc.push(total);

        if !cfg.obstacle_free {
            let start = rng.gen_range(35.0..45.0);
            let room = total - 15.0 - start;
            let mut n = rng.gen_range(cfg.min_obstacles..=cfg.max_obstacles.max(cfg.min_obstacles));
            while n > cfg.min_obstacles && room / (n as f64) < 20.0 {
                n -= 1;
            }
            let spacing = (room / n as f64).min(35.0);
            for k in 0..n {
                let s0 = start + k as f64 * spacing + rng.gen_range(0.0..0.3 * spacing);
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let lateral = side * cfg.lane_offset + rng.gen_range(-0.3..0.3);
                let moving = rng.gen::<f64>() < 0.35;
                let (radius, speed) = if moving {
                    (1.2, rng.gen_range(2.0..4.0))
                } else {
                    (rng.gen_range(0.6..1.0), 0.0)
                };
                sc.obstacles.push(Obstacle {
                    s0,
                    lateral,
                    radius,
                    speed,
                });
            }
        }
        sc
    }

    pub fn length(&self) -> f64 {
        self.arc[self.arc.len() - 1]
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = match self.arc.binary_search_by(|a| a.partial_cmp(&s).expect("finite arc")) {
            Ok(i) => i.min(self.arc.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.arc.len() - 2),
        };
        let seg = self.arc[i + 1] - self.arc[i];
        (i, if seg > 0.0 { (s - self.arc[i]) / seg } else { 0.0 })
    }

    /// Centerline point at arc length `s` (clamped to the road).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, f) = self.locate(s);
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// World position at road coordinates `(s, lateral)`.
    pub fn pose_at(&self, s: f64, lateral: f64) -> Vec2 {
        let p = self.point_at(s);
        let h = self.heading_at(s);
        [p[0] - lateral * h.sin(), p[1] + lateral * h.cos()]
    }

    /// Projects `p` onto the centerline, searching segments near `hint`.
    pub fn project(&self, p: Vec2, hint: usize) -> RoadPoint {
        let nseg = self.centerline.len() - 1;
        let lo = hint.saturating_sub(40);
        let hi = (hint + 40).min(nseg);
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in lo..hi {
            let (a, b) = (self.centerline[i], self.centerline[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let f = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a[0] + f * dx, a[1] + f * dy);
            let d2 = (p[0] - qx).powi(2) + (p[1] - qy).powi(2);
            if d2 < best.0 {
                best = (d2, i, f);
            }
        }
        let (_, i, f) = best;
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt();
        let heading = dy.atan2(dx);
        // unclamped along-track coordinate so the ends extend linearly
        let along = ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len;
        let along = if (i == 0 && along < 0.0) || (i + 1 == nseg && along > len) {
            along
        } else {
            f * len
        };
        let lateral = (-(p[0] - a[0]) * dy + (p[1] - a[1]) * dx) / len;
        RoadPoint {
            s: self.arc[i] + along,
            lateral,
            heading,
            index: i,
        }
    }

    /// Arc-length position of obstacle `k` after `t` seconds, or `None` once
    /// moving traffic has driven off the end of the map.
    pub fn obstacle_arc(&self, k: usize, t: f64) -> Option<f64> {
        let o = &self.obstacles[k];
        let s = o.s0 + o.speed * t;
        (s <= self.length()).then_some(s)
    }

    pub fn obstacle_center(&self, k: usize, t: f64) -> Option<Vec2> {
        self.obstacle_arc(k, t).map(|s| self.pose_at(s, self.obstacles[k].lateral))
    }

    pub fn obstacle_velocity(&self, k: usize, t: f64) -> Vec2 {
        match self.obstacle_arc(k, t) {
            Some(s) => {
                let h = self.heading_at(s);
                let v = self.obstacles[k].speed;
                [v * h.cos(), v * h.sin()]
            }
            None => [0.0, 0.0],
        }
    }

    /// Left and right road edges as line segments, restricted to centerline
    /// indices in `[lo, hi)`.
    pub fn boundary_segments(&self, lo: usize, hi: usize) -> Vec<(Vec2, Vec2)> {
        let hi = hi.min(self.centerline.len() - 1);
        let hw = self.lane_half_width;
        let edge = |i: usize, side: f64| {
            let p = self.centerline[i];
            let h = self.headings[i];
            [p[0] - side * hw * h.sin(), p[1] + side * hw * h.cos()]
        };
        let mut out = Vec::with_capacity(2 * (hi.saturating_sub(lo)));
        for side in [1.0, -1.0] {
            for i in lo..hi {
                out.push((edge(i, side), edge(i + 1, side)));
            }
        }
        out
    }
}

/// Distance along a ray to the first hit, or `None`.
fn ray_disc(o: Vec2, d: Vec2, c: Vec2, r: f64) -> Option<f64> {
    let (fx, fy) = (o[0] - c[0], o[1] - c[1]);
    let c2 = fx * fx + fy * fy - r * r;
    if c2 <= 0.0 {
        return Some(0.0);
    }
    let b = fx * d[0] + fy * d[1];
    let disc = b * b - c2;
    if disc < 0.0 || b > 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

fn ray_segment(o: Vec2, d: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = [a[0] - o[0], a[1] - o[1]];
    let t = (w[0] * e[1] - w[1] * e[0]) / denom;
    let u = (w[0] * d[1] - w[1] * d[0]) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Evenly spaced rays over 360 degrees starting at `heading`; returns hit
/// distances divided by `r_max`, capped at 1.
pub fn lidar_scan(origin: Vec2, heading: f64, n_rays: usize, r_max: f64, walls: &[(Vec2, Vec2)], discs: &[(Vec2, f64)]) -> Vec<f64> {
    (0..n_rays)
        .map(|k| {
            let ang = heading + 2.0 * PI * k as f64 / n_rays as f64;
            let d = [ang.cos(), ang.sin()];
            let mut best = r_max;
            for &(c, r) in discs {
                if let Some(t) = ray_disc(origin, d, c, r) {
                    best = best.min(t);
                }
            }
            for &(a, b) in walls {
                if let Some(t) = ray_segment(origin, d, a, b) {
                    best = best.min(t);
                }
            }
            (best / r_max).clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub steering_angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Done {
    Running,
    Success,
    CrashTerminal,
    OutOfRoad,
    Timeout,
}

impl Done {
    pub fn is_terminal(self) -> bool {
        self != Done::Running
    }

    /// Episode end that should cut bootstrapping (time limits do not).
    pub fn cuts_bootstrap(self) -> bool {
        matches!(self, Done::Success | Done::CrashTerminal | Done::OutOfRoad)
    }
}

/// Reward components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub displacement: f64,
    pub speed_term: f64,
    pub collision: bool,
    pub collision_term: f64,
    pub terminal_term: f64,
    pub lateral: f64,
}

impl StepInfo {
    pub fn reward(&self, cfg: &EnvConfig) -> f64 {
        cfg.c_disp * self.displacement + cfg.c_speed * self.speed_term + cfg.c_collision * self.collision_term + self.terminal_term
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub done: Done,
    pub info: StepInfo,
}

/// One running episode.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    scenario: Arc<Scenario>,
    ego: EgoState,
    steps: u32,
    progress: f64,
    lateral: f64,
    track: usize,
    status: Done,
}

impl Env {
    pub fn new(scenario: Arc<Scenario>, cfg: EnvConfig) -> Env {
        let h = scenario.headings[0];
        Env {
            ego: EgoState {
                position: scenario.centerline[0],
                heading: h,
                speed: 0.0,
                steering_angle: 0.0,
            },
            scenario,
            cfg,
            steps: 0,
            progress: 0.0,
            lateral: 0.0,
            track: 0,
            status: Done::Running,
        }
    }

    pub fn from_seed(seed: u64, cfg: EnvConfig) -> Env {
        let sc = Arc::new(Scenario::generate(seed, &cfg));
        Env::new(sc, cfg)
    }

    /// Places the ego at an explicit state (used by tests and tooling).
    pub fn with_ego(mut self, ego: EgoState) -> Env {
        self.ego = ego;
        let rp = self.scenario.project(ego.position, self.nearest_index(ego.position));
        self.progress = rp.s;
        self.lateral = rp.lateral;
        self.track = rp.index;
        self
    }

    /// Restores a mid-episode state exactly.
    pub fn restore(scenario: Arc<Scenario>, cfg: EnvConfig, ego: EgoState, steps: u32, progress: f64, lateral: f64, track: usize, status: Done) -> Env {
        Env {
            cfg,
            scenario,
            ego,
            steps,
            progress,
            lateral,
            track,
            status,
        }
    }

    fn nearest_index(&self, p: Vec2) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.scenario.centerline.iter().enumerate() {
            let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn cfg(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn ego(&self) -> &EgoState {
        &self.ego
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn lateral(&self) -> f64 {
        self.lateral
    }

    pub fn track_index(&self) -> usize {
        self.track
    }

    pub fn status(&self) -> Done {
        self.status
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.cfg.dt
    }

    pub fn road_heading(&self) -> f64 {
        self.scenario.heading_at(self.progress)
    }

    pub fn heading_error(&self) -> f64 {
        wrap_angle(self.ego.heading - self.road_heading())
    }

    /// Active obstacles as `(center, radius)` at the current time.
    pub fn obstacle_discs(&self) -> Vec<(Vec2, f64)> {
        let t = self.time();
        (0..self.scenario.obstacles.len())
            .filter_map(|k| self.scenario.obstacle_center(k, t).map(|c| (c, self.scenario.obstacles[k].radius)))
            .collect()
    }

    pub fn in_collision(&self) -> bool {
        let p = self.ego.position;
        self.obstacle_discs()
            .iter()
            .any(|(c, r)| (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) < (r + self.cfg.ego_radius).powi(2))
    }

    pub fn lidar(&self) -> Vec<f64> {
        let reach = (2.0 * self.cfg.r_max) as usize + 10;
        let walls = self.scenario.boundary_segments(self.track.saturating_sub(reach), self.track + reach);
        lidar_scan(self.ego.position, self.ego.heading, self.cfg.n_rays, self.cfg.r_max, &walls, &self.obstacle_discs())
    }

    pub fn observe(&self) -> Vec<f64> {
        let c = &self.cfg;
        let mut obs = Vec::with_capacity(c.obs_dim());
        obs.push(self.ego.speed / c.v_max);
        obs.push((self.lateral / self.scenario.lane_half_width).clamp(-1.0, 1.0));
        obs.push(self.heading_error() / PI);
        obs.push(self.ego.steering_angle / c.steer_max);
        obs.extend(self.lidar());
        let next = self.scenario.checkpoint_arc.iter().position(|&s| s > self.progress).unwrap_or(self.scenario.checkpoints.len() - 1);
        let (sin_h, cos_h) = self.ego.heading.sin_cos();
        for k in 0..c.n_checkpoints {
            let idx = (next + k).min(self.scenario.checkpoints.len() - 1);
            let cp = self.scenario.checkpoints[idx];
            let (dx, dy) = (cp[0] - self.ego.position[0], cp[1] - self.ego.position[1]);
            let fx = cos_h * dx + sin_h * dy;
            let fy = -sin_h * dx + cos_h * dy;
            obs.push((fx / c.nav_scale).clamp(-1.0, 1.0));
            obs.push((fy / c.nav_scale).clamp(-1.0, 1.0));
        }
        obs
    }

    /// Maps a normalized action to (acceleration m/s^2, steering angle rad).
    pub fn decode_action(&self, action: [f64; 2]) -> (f64, f64) {
        let a = action[0].clamp(-1.0, 1.0);
        let accel = if a >= 0.0 { a * self.cfg.accel_max } else { -a * self.cfg.accel_min };
        (accel, action[1].clamp(-1.0, 1.0) * self.cfg.steer_max)
    }

    /// Advances dynamics and episode status without building an observation.
    pub fn step_core(&mut self, action: [f64; 2]) -> Result<(f64, f64, Done, StepInfo), EnvError> {
        if self.status.is_terminal() {
            return Err(EnvError::Finished(self.status));
        }
        let c = &self.cfg;
        let (accel, steer) = self.decode_action(action);
        let e = &mut self.ego;
        e.steering_angle = steer;
        e.position[0] += e.speed * e.heading.cos() * c.dt;
        e.position[1] += e.speed * e.heading.sin() * c.dt;
        e.heading = wrap_angle(e.heading + e.speed / c.wheelbase * steer.tan() * c.dt);
        e.speed = (e.speed + accel * c.dt).clamp(0.0, c.v_max);
        self.steps += 1;

        let rp = self.scenario.project(self.ego.position, self.track);
        let displacement = rp.s - self.progress;
        self.progress = rp.s;
        self.lateral = rp.lateral;
        self.track = rp.index;

        let collision = self.in_collision();
        let c = &self.cfg;
        let done = if self.progress >= self.scenario.length() - c.goal_tolerance {
            Done::Success
        } else if self.lateral.abs() > self.scenario.lane_half_width {
            Done::OutOfRoad
        } else if collision && c.terminate_on_crash {
            Done::CrashTerminal
        } else if self.steps >= c.timeout {
            Done::Timeout
        } else {
            Done::Running
        };
        self.status = done;
        let info = StepInfo {
            displacement,
            speed_term: self.ego.speed / c.v_max,
            collision,
            collision_term: if collision { COLLISION_PENALTY } else { 0.0 },
            terminal_term: match done {
                Done::Success => SUCCESS_REWARD,
                Done::OutOfRoad => OUT_OF_ROAD_PENALTY,
                _ => 0.0,
            },
            lateral: self.lateral,
        };
        let reward = info.reward(c);
        let cost = if collision { 1.0 } else { 0.0 };
        Ok((reward, cost, done, info))
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult, EnvError> {
        let (reward, cost, done, info) = self.step_core(action)?;
        Ok(StepResult {
            obs: self.observe(),
            reward,
            cost,
            done,
            info,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig::default();
        let a = serde_json::to_string(&Scenario::generate(17, &cfg)).unwrap();
        let b = serde_json::to_string(&Scenario::generate(17, &cfg)).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&Scenario::generate(18, &cfg)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_contract_over_seed_sweep() {
        let cfg = EnvConfig::default();
        for seed in 0..100 {
            let sc = Scenario::generate(seed, &cfg);
            assert!(sc.segments.contains(&SegmentKind::Curve), "seed {seed}");
            assert!(sc.obstacles.len() >= 2, "seed {seed}");
            for o in &sc.obstacles {
                assert!(o.s0 - o.radius > 10.0, "obstacle near the start pose");
                assert!(o.lateral.abs() + o.radius < sc.lane_half_width);
            }
            for (cp, s) in sc.checkpoints.iter().zip(&sc.checkpoint_arc) {
                let rp = sc.project(*cp, (*s as usize).min(sc.centerline.len() - 2));
                assert!(rp.lateral.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn obstacle_free_flag() {
        let cfg = EnvConfig {
            obstacle_free: true,
            ..EnvConfig::default()
        };
        assert!(Scenario::generate(3, &cfg).obstacles.is_empty());
    }

    #[test]
    fn stationary_zero_action_zero_reward() {
        let mut env = Env::from_seed(5, EnvConfig::default());
        let r = env.step([0.0, 0.0]).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.info.displacement, 0.0);
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.obs.len(), EnvConfig::default().obs_dim());
        assert!(r.obs.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn out_of_road_terminates_with_penalty() {
        let cfg = EnvConfig {
            obstacle_free: true,
            ..EnvConfig::default()
        };
        let mut env = Env::from_seed(2, cfg);
        let mut last = None;
        for _ in 0..400 {
            let r = env.step([1.0, 1.0]).unwrap();
            if r.done.is_terminal() {
                last = Some(r);
                break;
            }
        }
        let r = last.expect("episode should end");
        assert_eq!(r.done, Done::OutOfRoad);
        assert_eq!(r.info.terminal_term, -5.0);
        assert!(env.step([0.0, 0.0]).is_err());
    }

    #[test]
    fn ray_disc_dead_ahead() {
        let d = lidar_scan([0.0, 0.0], 0.0, 8, 30.0, &[], &[([12.0, 0.0], 1.5)]);
        assert!((d[0] - (12.0 - 1.5) / 30.0).abs() < 1e-12);
        assert_eq!(d[4], 1.0);
    }
}
