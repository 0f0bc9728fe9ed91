//! The end-to-end training loop.
//!
//! Stage 1 drives with `pi^g` while the scripted expert (or a live operator)
//! may take over, and runs one stage-1 update per env step. When the
//! stage-switch test passes, `pi^r` is copied from `pi^g` and stage 2 drives
//! through the confidence switch with one stage-2 update per step.
//!
//! Everything random flows from one seeded generator, so a run is a pure
//! function of its config as long as no live operator is involved.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{draw_noise, Action, AgentConfig, AgentParams, PolicyKind};
use crate::bridge::{BridgeLink, FrameMsg, HudFlags};
use crate::buffer::{transition_ready, ReplayBuffers, RingBuffer, StageStats, Thresholds, Transition, Window};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dist::DistError;
use crate::dpvp::{apply_stage1, plan_stage1, AgentOptim, LearnError, LearnerConfig};
use crate::env::{Done, EgoState, Env, EnvConfig, Scenario};
use crate::expert::{expert_action, should_intervene, ExpertConfig};
use crate::nn::{Adam, ParamSet};
use crate::shared::{ConfidenceReport, apply_stage2, init_self_policy, plan_stage2, select_action_shared, shared_mean_action, ShareConfig, ShareMode};

/// First scenario seed of the held-out evaluation set. Training scenarios use
/// `seed * 1000 + k` with `k < scenario_pool <= 1000`.
pub const EVAL_SEED_BASE: u64 = 1_000_000_000;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("evaluation needs at least one episode")]
    NoEpisodes,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoConfidence,
    NoShare,
    /// Stage 1 only.
    DpvpOnly,
}

impl Mode {
    pub fn share_mode(self) -> Option<ShareMode> {
        match self {
            Mode::Full => Some(ShareMode::Full),
            Mode::NoConfidence => Some(ShareMode::NoConfidence),
            Mode::NoShare => Some(ShareMode::NoShare),
            Mode::DpvpOnly => None,
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown mode {s:?} (full, no_confidence, no_share, dpvp_only)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanSource {
    Scripted,
    Live,
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub human_source: HumanSource,
    pub total_steps: u64,
    pub gamma: f64,
    pub eta: f64,
    pub delta: f64,
    pub tau: f64,
    pub lr_critic: f64,
    pub lr_policy: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub td_clip: f64,
    pub init_alpha: f64,
    pub target_entropy: f64,
    pub hidden: Vec<usize>,
    pub std_min: f64,
    pub std_max: f64,
    pub novice_capacity: usize,
    pub human_capacity: usize,
    pub n_g: u64,
    pub theta_c: f64,
    pub kappa: f64,
    pub stats_window: usize,
    /// Updates start once the novice buffer holds this many transitions.
    pub learning_starts: usize,
    pub scenario_pool: u64,
    /// Write the per-step trace next to the metrics.
    pub trace: bool,
    /// Save a checkpoint every this many steps (0 = never) when an output
    /// directory is set.
    pub checkpoint_every: u64,
    /// Evaluate every this many steps (0 = never).
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub env: EnvConfig,
    pub expert: ExpertConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let l = LearnerConfig::default();
        let a = AgentConfig::default();
        let t = Thresholds::default();
        Self {
            seed: 0,
            mode: Mode::Full,
            human_source: HumanSource::Scripted,
            total_steps: 100_000,
            gamma: l.gamma,
            eta: l.eta,
            delta: 0.15,
            tau: l.tau,
            lr_critic: l.lr_critic,
            lr_policy: l.lr_policy,
            lr_alpha: l.lr_alpha,
            batch_size: l.batch_size,
            td_clip: l.td_clip,
            init_alpha: a.init_alpha,
            target_entropy: a.target_entropy,
            hidden: a.hidden,
            std_min: a.std_min,
            std_max: a.std_max,
            novice_capacity: 100_000,
            human_capacity: 20_000,
            n_g: t.n_g,
            theta_c: t.theta_c,
            kappa: t.kappa,
            stats_window: 1000,
            learning_starts: 256,
            scenario_pool: 20,
            trace: true,
            checkpoint_every: 0,
            eval_every: 0,
            eval_episodes: 10,
            env: EnvConfig::default(),
            expert: ExpertConfig::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(TrainError::Config(what.to_string()))
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)")?;
        check(pos(self.eta), "eta must be positive")?;
        check(self.delta > 0.0 && self.delta <= 0.5, "delta must lie in (0, 0.5]")?;
        check(self.tau > 0.0 && self.tau <= 1.0, "tau must lie in (0, 1]")?;
        check(pos(self.lr_critic) && pos(self.lr_policy) && pos(self.lr_alpha), "learning rates must be positive")?;
        check(self.batch_size >= 2, "batch_size must be at least 2")?;
        check(pos(self.td_clip), "td_clip must be positive")?;
        check(pos(self.init_alpha), "init_alpha must be positive")?;
        check(self.target_entropy.is_finite(), "target_entropy must be finite")?;
        check(!self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0), "hidden must list positive widths")?;
        check(pos(self.std_min) && self.std_max > self.std_min && self.std_max.is_finite(), "std bounds must satisfy 0 < std_min < std_max")?;
        check(self.novice_capacity > 0 && self.human_capacity > 0, "buffer capacities must be positive")?;
        check(pos(self.theta_c), "theta_c must be positive")?;
        check(self.kappa.is_finite(), "kappa must be finite")?;
        check(self.stats_window > 0, "stats_window must be positive")?;
        check(self.learning_starts >= 1, "learning_starts must be at least 1")?;
        check(self.scenario_pool >= 1 && self.scenario_pool <= 1000, "scenario_pool must lie in [1, 1000]")?;
        check(self.eval_episodes > 0 || self.eval_every == 0, "eval_episodes must be positive when eval_every is set")?;
        let e = &self.env;
        check(e.n_rays > 0 && e.n_checkpoints > 0 && e.timeout > 0, "env counts must be positive")?;
        check(pos(e.dt) && pos(e.v_max) && pos(e.r_max) && pos(e.wheelbase) && pos(e.steer_max), "env physical constants must be positive")?;
        check(e.accel_min < 0.0 && e.accel_max > 0.0, "env accel range must straddle zero")?;
        check(pos(e.lane_half_width) && pos(e.ego_radius) && pos(e.checkpoint_spacing) && pos(e.nav_scale), "env geometry must be positive")?;
        check(e.min_obstacles <= e.max_obstacles, "min_obstacles must not exceed max_obstacles")?;
        let x = &self.expert;
        check(x.horizon > 0 && x.act_tolerance >= 0.0 && pos(x.cruise_speed) && pos(x.lookahead), "expert parameters out of range")?;
        Ok(())
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            gamma: self.gamma,
            eta: self.eta,
            tau: self.tau,
            batch_size: self.batch_size,
            lr_critic: self.lr_critic,
            lr_policy: self.lr_policy,
            lr_alpha: self.lr_alpha,
            td_clip: self.td_clip,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            obs_dim: self.env.obs_dim(),
            hidden: self.hidden.clone(),
            std_min: self.std_min,
            std_max: self.std_max,
            target_entropy: self.target_entropy,
            init_alpha: self.init_alpha,
            seed: self.seed,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            theta_c: self.theta_c,
            kappa: self.kappa,
            n_g: self.n_g,
        }
    }

    /// Switch settings for stage 2; `None` in `dpvp_only` mode.
    pub fn share(&self) -> Option<ShareConfig> {
        let mode = self.mode.share_mode()?;
        Some(ShareConfig::new(self.delta, self.std_max, mode).expect("validated config"))
    }

    pub fn train_scenario_seed(&self, episode: u64) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(episode % self.scenario_pool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// One completed training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub stage: u8,
    pub scenario_seed: u64,
    pub steps: u32,
    pub outcome: Done,
    pub episodic_return: f64,
    pub episodic_cost: f64,
    pub success: bool,
    pub takeover_rate: f64,
    pub reward_policy_rate: f64,
    pub sigma_mean_c: Option<f64>,
    pub alpha: f64,
}

/// Held-out evaluation at some training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_cost: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub stage: u8,
    #[serde(flatten)]
    pub stats: EvalStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepFlags {
    pub takeover: bool,
    pub reward_policy: bool,
    pub done: bool,
}

/// One line of the per-step trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFrame {
    pub step: u64,
    pub episode: u64,
    pub stage: u8,
    pub obs_digest: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_h: Option<Action>,
    pub reward: f64,
    pub cost: f64,
    pub flags: StepFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<ConfidenceReport>,
}

/// FNV-1a over the bit patterns of an observation.
pub fn obs_digest(obs: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in obs {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Episode {
    index: u64,
    scenario_seed: u64,
    ret: f64,
    cost: f64,
    steps: u32,
    takeovers: u32,
    reward_policy: u32,
}

/// Run-wide counters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: u64,
    /// Steps where a supervisor's action was executed.
    pub human_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub total_cost: f64,
    pub stage2_steps: u64,
    pub stage2_cost: f64,
    pub reward_policy_steps: u64,
    /// Env step count when stage 2 began.
    pub switch_step: Option<u64>,
}

impl Counters {
    pub fn intervention_rate(&self) -> f64 {
        if self.env_steps == 0 {
            0.0
        } else {
            self.human_steps as f64 / self.env_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub stage: u8,
    pub counters: Counters,
    pub intervention_rate: f64,
    pub episodes_logged: usize,
    pub final_eval: Option<EvalStats>,
}

/// What drives the car during evaluation.
pub trait Driver {
    fn act(&mut self, env: &Env, obs: &[f64]) -> std::result::Result<Action, LearnError>;
}

/// The scripted expert as a driver.
pub struct ExpertDriver(pub ExpertConfig);

impl Driver for ExpertDriver {
    fn act(&mut self, env: &Env, _obs: &[f64]) -> std::result::Result<Action, LearnError> {
        Ok(expert_action(env, &self.0))
    }
}

/// Deterministic mean action of a trained agent.
pub enum PolicyDriver<'a> {
    Guided(&'a AgentParams),
    SelfLearning(&'a AgentParams),
    Shared(&'a AgentParams, ShareConfig),
}

impl Driver for PolicyDriver<'_> {
    fn act(&mut self, _env: &Env, obs: &[f64]) -> std::result::Result<Action, LearnError> {
        Ok(match self {
            PolicyDriver::Guided(a) => a.mean_action(PolicyKind::Guided, obs)?,
            PolicyDriver::SelfLearning(a) => a.mean_action(PolicyKind::SelfLearning, obs)?,
            PolicyDriver::Shared(a, cfg) => shared_mean_action(obs, a, cfg)?.0,
        })
    }
}

/// Runs `n` episodes on scenario seeds `seed_base..seed_base + n`.
pub fn evaluate_driver(driver: &mut dyn Driver, env_cfg: &EnvConfig, n: usize, seed_base: u64) -> Result<EvalStats> {
    if n == 0 {
        return Err(TrainError::NoEpisodes);
    }
    let (mut ret, mut cost, mut ok) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let mut env = Env::from_seed(seed_base + i as u64, env_cfg.clone());
        let mut obs = env.observe();
        loop {
            let a = driver.act(&env, &obs)?;
            let r = env.step(a).expect("episode still running");
            ret += r.reward;
            cost += r.cost;
            obs = r.obs;
            if r.done.is_terminal() {
                ok += (r.done == Done::Success) as usize;
                break;
            }
        }
    }
    Ok(EvalStats {
        episodes: n,
        mean_return: ret / n as f64,
        mean_cost: cost / n as f64,
        success_rate: ok as f64 / n as f64,
    })
}

/// Training state plus its output sinks.
pub struct Trainer {
    cfg: TrainConfig,
    pub agent: AgentParams,
    pub optim: AgentOptim,
    pub buffers: ReplayBuffers,
    pub stats: StageStats,
    stage: Stage,
    rng: ChaCha8Rng,
    env: Env,
    obs: Vec<f64>,
    episode: Episode,
    counters: Counters,
    rows: Vec<MetricsRow>,
    evals: Vec<EvalRow>,
    metrics_out: Option<Box<dyn Write + Send>>,
    trace_out: Option<Box<dyn Write + Send>>,
    eval_out: Option<Box<dyn Write + Send>>,
    out_dir: Option<PathBuf>,
    bridge: Option<BridgeLink>,
    started: Instant,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.stage)
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = AgentParams::new(cfg.agent());
        let optim = AgentOptim::new(&agent, &cfg.learner());
        let env = Env::from_seed(cfg.train_scenario_seed(0), cfg.env.clone());
        let obs = env.observe();
        Ok(Self {
            agent,
            optim,
            buffers: ReplayBuffers::new(cfg.novice_capacity, cfg.human_capacity),
            stats: StageStats::new(cfg.stats_window),
            stage: Stage::One,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            episode: Episode {
                scenario_seed: env.scenario().seed,
                ..Episode::default()
            },
            env,
            obs,
            counters: Counters::default(),
            rows: Vec::new(),
            evals: Vec::new(),
            metrics_out: None,
            trace_out: None,
            eval_out: None,
            out_dir: None,
            bridge: None,
            started: Instant::now(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    /// Metrics rows emitted by this process (not those before a resume).
    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn evals(&self) -> &[EvalRow] {
        &self.evals
    }

    /// Overrides the total step budget, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, total: u64) {
        self.cfg.total_steps = total;
    }

    /// Sends metrics rows, trace frames and evaluation rows as JSON lines.
    pub fn set_writers(&mut self, metrics: Option<Box<dyn Write + Send>>, trace: Option<Box<dyn Write + Send>>, evals: Option<Box<dyn Write + Send>>) {
        self.metrics_out = metrics;
        self.trace_out = trace;
        self.eval_out = evals;
    }

    /// Writes `metrics.jsonl`, `trace.jsonl`, `evals.jsonl` and periodic
    /// checkpoints into `dir`, appending when resuming.
    pub fn set_output_dir(&mut self, dir: &Path, append: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<Box<dyn Write + Send>> {
            let f = std::fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(dir.join(name))?;
            Ok(Box::new(BufWriter::new(f)))
        };
        self.metrics_out = Some(open("metrics.jsonl")?);
        self.trace_out = if self.cfg.trace { Some(open("trace.jsonl")?) } else { None };
        self.eval_out = Some(open("evals.jsonl")?);
        self.out_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn attach_bridge(&mut self, link: BridgeLink) {
        self.bridge = Some(link);
    }

    fn share(&self) -> ShareConfig {
        self.cfg.share().unwrap_or(ShareConfig::new(self.cfg.delta, self.cfg.std_max, ShareMode::Full).expect("validated config"))
    }

    /// Ends stage 1 now, whatever the switch test says.
    pub fn enter_stage_two(&mut self) -> Result<()> {
        if self.stage == Stage::Two {
            return Ok(());
        }
        init_self_policy(&mut self.agent, &mut self.optim)?;
        self.stage = Stage::Two;
        self.counters.switch_step = Some(self.counters.env_steps);
        log::info!("stage 2 begins at step {}", self.counters.env_steps);
        Ok(())
    }

    /// Runs to a fresh copy of `mode`, for comparing stage-2 variants from one
    /// stage-1 state.
    pub fn set_mode(&mut self, mode: Mode) {
        self.cfg.mode = mode;
    }

    fn supervisor(&self, a_g: Action) -> Option<Action> {
        if let Some(link) = &self.bridge {
            let op = link.operator();
            if let Some(a) = op.takeover() {
                return Some(a);
            }
            if self.cfg.human_source == HumanSource::Live {
                return None;
            }
        }
        match self.cfg.human_source {
            HumanSource::Scripted => should_intervene(&self.env, a_g, &self.cfg.expert).a_h,
            HumanSource::Live => None,
        }
    }

    fn wait_while_paused(&self) {
        if let Some(link) = &self.bridge {
            while link.operator().paused && !link.stopped() {
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }

    /// One env step plus one learner update.
    pub fn step(&mut self) -> Result<StepFrame> {
        self.wait_while_paused();
        let obs = std::mem::take(&mut self.obs);
        let (executed, a_g, a_h, confidence) = match self.stage {
            Stage::One => {
                let head = self.agent.head(PolicyKind::Guided, &obs)?;
                let sample = head.sample_with(draw_noise(&mut self.rng));
                let a_h = self.supervisor(sample.action);
                let executed = a_h.unwrap_or(sample.action);
                self.stats.nll.push(-head.log_prob(executed));
                (executed, sample.action, a_h, None)
            }
            Stage::Two => {
                let (sample, report) = select_action_shared(&obs, &self.agent, &self.share(), &mut self.rng)?;
                (sample.action, sample.action, None, Some(report))
            }
        };
        let res = self.env.step(executed).expect("env reset after every terminal step");
        let frame = StepFrame {
            step: self.counters.env_steps + 1,
            episode: self.episode.index,
            stage: self.stage.index(),
            obs_digest: obs_digest(&obs),
            action: executed,
            a_h,
            reward: res.reward,
            cost: res.cost,
            flags: StepFlags {
                takeover: a_h.is_some(),
                reward_policy: confidence.is_some_and(|c| !c.chose_human_guided),
                done: res.done.is_terminal(),
            },
            confidence,
        };
        self.buffers.record(Transition {
            obs,
            a_g,
            a_h,
            reward: res.reward,
            next_obs: res.obs.clone(),
            done: res.done.cuts_bootstrap(),
        });

        let c = &mut self.counters;
        c.env_steps += 1;
        c.human_steps += a_h.is_some() as u64;
        c.total_cost += res.cost;
        if self.stage == Stage::Two {
            c.stage2_steps += 1;
            c.stage2_cost += res.cost;
            c.reward_policy_steps += frame.flags.reward_policy as u64;
        }
        self.stats.env_steps += 1;
        let ep = &mut self.episode;
        ep.ret += res.reward;
        ep.cost += res.cost;
        ep.steps += 1;
        ep.takeovers += a_h.is_some() as u32;
        ep.reward_policy += frame.flags.reward_policy as u32;

        if self.buffers.novice.len() >= self.cfg.learning_starts {
            let learner = self.cfg.learner();
            let report = match self.stage {
                Stage::One => {
                    let plan = plan_stage1(&self.buffers, learner.batch_size, &mut self.rng)?;
                    apply_stage1(&mut self.agent, &mut self.optim, &learner, &plan)?
                }
                Stage::Two => {
                    let plan = plan_stage2(&self.buffers, learner.batch_size, &mut self.rng)?;
                    apply_stage2(&mut self.agent, &mut self.optim, &learner, &plan)?
                }
            };
            self.stats.sigma_c.push(report.sigma_mean_c);
            self.counters.updates += 1;
        }

        if let Some(w) = &mut self.trace_out {
            serde_json::to_writer(&mut *w, &frame).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        if let Some(link) = &self.bridge {
            let flags = HudFlags {
                speed: self.env.ego().speed,
                takeover: frame.flags.takeover,
                total_step: self.counters.env_steps,
                total_time: self.started.elapsed().as_secs_f64(),
                takeover_rate: self.counters.intervention_rate(),
                reward_policy: frame.flags.reward_policy,
            };
            link.publish(&FrameMsg::capture(&self.env, self.counters.env_steps, self.stage.index(), flags));
        }

        if res.done.is_terminal() {
            self.finish_episode(res.done)?;
        } else {
            self.obs = res.obs;
        }

        if self.stage == Stage::One && self.cfg.mode != Mode::DpvpOnly && transition_ready(&self.stats, &self.cfg.thresholds()) {
            self.enter_stage_two()?;
        }
        Ok(frame)
    }

    fn finish_episode(&mut self, done: Done) -> Result<()> {
        let ep = self.episode;
        let sigma = self.stats.sigma_mean_c();
        let row = MetricsRow {
            step: self.counters.env_steps,
            episode: ep.index,
            stage: self.stage.index(),
            scenario_seed: ep.scenario_seed,
            steps: ep.steps,
            outcome: done,
            episodic_return: ep.ret,
            episodic_cost: ep.cost,
            success: done == Done::Success,
            takeover_rate: ep.takeovers as f64 / ep.steps as f64,
            reward_policy_rate: ep.reward_policy as f64 / ep.steps as f64,
            sigma_mean_c: sigma.is_finite().then_some(sigma),
            alpha: self.agent.alpha(),
        };
        if let Some(w) = &mut self.metrics_out {
            serde_json::to_writer(&mut *w, &row).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.rows.push(row);
        self.counters.episodes += 1;
        let next = ep.index + 1;
        self.env = Env::from_seed(self.cfg.train_scenario_seed(next), self.cfg.env.clone());
        self.obs = self.env.observe();
        self.episode = Episode {
            index: next,
            scenario_seed: self.env.scenario().seed,
            ..Episode::default()
        };
        Ok(())
    }

    /// Deterministic evaluation of the current policy on held-out scenarios.
    pub fn evaluate(&self, n: usize, seed_base: u64) -> Result<EvalStats> {
        let mut driver = match (self.stage, self.cfg.share()) {
            (Stage::One, _) | (Stage::Two, None) => PolicyDriver::Guided(&self.agent),
            (Stage::Two, Some(s)) if s.mode == ShareMode::NoShare => PolicyDriver::SelfLearning(&self.agent),
            (Stage::Two, Some(s)) => PolicyDriver::Shared(&self.agent, s),
        };
        evaluate_driver(&mut driver, &self.cfg.env, n, seed_base)
    }

    fn record_eval(&mut self) -> Result<()> {
        let stats = self.evaluate(self.cfg.eval_episodes, EVAL_SEED_BASE)?;
        let row = EvalRow {
            step: self.counters.env_steps,
            stage: self.stage.index(),
            stats,
        };
        if let Some(w) = &mut self.eval_out {
            serde_json::to_writer(&mut *w, &row).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.evals.push(row);
        Ok(())
    }

    /// Steps until `env_steps == target` (or the bridge asks to stop).
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        while self.counters.env_steps < target {
            if self.bridge.as_ref().is_some_and(BridgeLink::stopped) {
                break;
            }
            self.step()?;
            let n = self.counters.env_steps;
            if self.cfg.eval_every > 0 && n % self.cfg.eval_every == 0 {
                self.record_eval()?;
            }
            if self.cfg.checkpoint_every > 0 && n % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = self.out_dir.clone() {
                    self.save(&dir.join("checkpoint.bin"))?;
                }
            }
        }
        self.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics_out, &mut self.trace_out, &mut self.eval_out].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }

    /// Runs to `total_steps` and summarizes.
    pub fn run(&mut self) -> Result<FinalReport> {
        self.run_until(self.cfg.total_steps)?;
        if let Some(dir) = self.out_dir.clone() {
            self.save(&dir.join("checkpoint.bin"))?;
        }
        Ok(self.report(None))
    }

    pub fn report(&self, final_eval: Option<EvalStats>) -> FinalReport {
        FinalReport {
            stage: self.stage.index(),
            counters: self.counters,
            intervention_rate: self.counters.intervention_rate(),
            episodes_logged: self.rows.len(),
            final_eval,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_bytes("config", serde_json::to_vec(&self.cfg).expect("config serializes"));
        let a = &self.agent;
        for (name, net) in nets(a) {
            put_net(&mut ck, &format!("net/{name}"), net);
        }
        ck.put_f64_vec("agent/log_alpha", vec![a.log_alpha]);
        for (name, opt) in [("pi_g", &self.optim.pi_g), ("pi_r", &self.optim.pi_r), ("z_g", &self.optim.z_g), ("z_c", &self.optim.z_c)] {
            ck.put_u64(&format!("adam/{name}/step"), vec![opt.step]);
            ck.put_f64_vec(&format!("adam/{name}/hyper"), vec![opt.lr, opt.beta1, opt.beta2, opt.eps]);
            ck.put_f64_vec(&format!("adam/{name}/m"), opt.m.flatten());
            ck.put_f64_vec(&format!("adam/{name}/v"), opt.v.flatten());
        }
        put_buffer(&mut ck, "buffer/novice", &self.buffers.novice);
        put_buffer(&mut ck, "buffer/human", &self.buffers.human);
        ck.put_f64_vec("stats/sigma_c", self.stats.sigma_c.values().collect());
        ck.put_f64_vec("stats/nll", self.stats.nll.values().collect());
        ck.put_u64("stats/env_steps", vec![self.stats.env_steps]);
        ck.put_u64("stage", vec![self.stage.index() as u64]);
        let seed = self.rng.get_seed();
        ck.put_bytes("rng/seed", seed.to_vec());
        let pos = self.rng.get_word_pos();
        ck.put_u64("rng/state", vec![self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        let e = self.env.ego();
        ck.put_u64("env/state", vec![self.env.scenario().seed, self.env.steps() as u64, self.env.track_index() as u64]);
        ck.put_f64_vec("env/ego", vec![e.position[0], e.position[1], e.heading, e.speed, e.steering_angle]);
        ck.put_f64_vec("env/road", vec![self.env.progress(), self.env.lateral()]);
        let ep = &self.episode;
        ck.put_u64("episode/counts", vec![ep.index, ep.scenario_seed, ep.steps as u64, ep.takeovers as u64, ep.reward_policy as u64]);
        ck.put_f64_vec("episode/sums", vec![ep.ret, ep.cost]);
        ck.put_bytes("counters", serde_json::to_vec(&self.counters).expect("counters serialize"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(ck.bytes("config")?).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut t = Trainer::new(cfg)?;
        let names: Vec<&'static str> = nets(&t.agent).iter().map(|(n, _)| *n).collect();
        for name in names {
            let net = net_mut(&mut t.agent, name);
            get_net(ck, &format!("net/{name}"), net)?;
        }
        t.agent.log_alpha = ck.f64s_len("agent/log_alpha", 1)?[0];
        for name in ["pi_g", "pi_r", "z_g", "z_c"] {
            let opt: &mut Adam = match name {
                "pi_g" => &mut t.optim.pi_g,
                "pi_r" => &mut t.optim.pi_r,
                "z_g" => &mut t.optim.z_g,
                _ => &mut t.optim.z_c,
            };
            opt.step = ck.u64s_len(&format!("adam/{name}/step"), 1)?[0];
            let h = ck.f64s_len(&format!("adam/{name}/hyper"), 4)?;
            (opt.lr, opt.beta1, opt.beta2, opt.eps) = (h[0], h[1], h[2], h[3]);
            for (part, dst) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let key = format!("adam/{name}/{part}");
                if !dst.unflatten(ck.f64s(&key)?) {
                    return Err(invalid(&key, "length does not match the network"));
                }
            }
        }
        let obs_dim = t.cfg.env.obs_dim();
        t.buffers.novice = get_buffer(ck, "buffer/novice", obs_dim)?;
        t.buffers.human = get_buffer(ck, "buffer/human", obs_dim)?;
        for (key, w) in [("stats/sigma_c", &mut t.stats.sigma_c), ("stats/nll", &mut t.stats.nll)] {
            let mut fresh = Window::new(t.cfg.stats_window);
            for v in ck.f64s(key)? {
                fresh.push(*v);
            }
            *w = fresh;
        }
        t.stats.env_steps = ck.u64s_len("stats/env_steps", 1)?[0];
        t.stage = match ck.u64s_len("stage", 1)?[0] {
            1 => Stage::One,
            2 => Stage::Two,
            s => return Err(invalid("stage", &format!("unknown stage {s}"))),
        };
        let seed: [u8; 32] = ck.bytes("rng/seed")?.try_into().map_err(|_| invalid("rng/seed", "expected 32 bytes"))?;
        let st = ck.u64s_len("rng/state", 3)?;
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(st[0]);
        t.rng.set_word_pos(st[1] as u128 | ((st[2] as u128) << 64));

        let es = ck.u64s_len("env/state", 3)?;
        let ego = ck.f64s_len("env/ego", 5)?;
        let road = ck.f64s_len("env/road", 2)?;
        let scenario = Arc::new(Scenario::generate(es[0], &t.cfg.env));
        let track = es[2] as usize;
        if track >= scenario.centerline.len() {
            return Err(invalid("env/state", "track index beyond the route"));
        }
        let ego = EgoState {
            position: [ego[0], ego[1]],
            heading: ego[2],
            speed: ego[3],
            steering_angle: ego[4],
        };
        t.env = Env::restore(scenario, t.cfg.env.clone(), ego, es[1] as u32, road[0], road[1], track, Done::Running);
        t.obs = t.env.observe();
        let ec = ck.u64s_len("episode/counts", 5)?;
        let sums = ck.f64s_len("episode/sums", 2)?;
        t.episode = Episode {
            index: ec[0],
            scenario_seed: ec[1],
            steps: ec[2] as u32,
            takeovers: ec[3] as u32,
            reward_policy: ec[4] as u32,
            ret: sums[0],
            cost: sums[1],
        };
        t.counters = serde_json::from_slice(ck.bytes("counters")?).map_err(|e| invalid("counters", &e.to_string()))?;
        Ok(t)
    }
}

fn invalid(name: &str, detail: &str) -> TrainError {
    TrainError::Checkpoint(CheckpointError::Invalid {
        name: name.to_string(),
        detail: detail.to_string(),
    })
}

fn nets(a: &AgentParams) -> [(&'static str, &ParamSet); 8] {
    [
        ("pi_g", &a.pi_g),
        ("pi_r", &a.pi_r),
        ("z_g", &a.z_g),
        ("z_c", &a.z_c),
        ("pi_g_target", &a.pi_g_target),
        ("pi_r_target", &a.pi_r_target),
        ("z_g_target", &a.z_g_target),
        ("z_c_target", &a.z_c_target),
    ]
}

fn net_mut<'a>(a: &'a mut AgentParams, name: &str) -> &'a mut ParamSet {
    match name {
        "pi_g" => &mut a.pi_g,
        "pi_r" => &mut a.pi_r,
        "z_g" => &mut a.z_g,
        "z_c" => &mut a.z_c,
        "pi_g_target" => &mut a.pi_g_target,
        "pi_r_target" => &mut a.pi_r_target,
        "z_g_target" => &mut a.z_g_target,
        _ => &mut a.z_c_target,
    }
}

fn put_net(ck: &mut Checkpoint, prefix: &str, net: &ParamSet) {
    for (i, l) in net.layers().iter().enumerate() {
        ck.put_f64(&format!("{prefix}/{i}/weight"), &[l.n_out, l.n_in], l.weight.clone());
        ck.put_f64(&format!("{prefix}/{i}/bias"), &[l.n_out], l.bias.clone());
    }
}

fn get_net(ck: &Checkpoint, prefix: &str, net: &mut ParamSet) -> Result<()> {
    for (i, l) in net.layers_mut().iter_mut().enumerate() {
        let w = ck.f64s_len(&format!("{prefix}/{i}/weight"), l.weight.len())?;
        l.weight.copy_from_slice(w);
        let b = ck.f64s_len(&format!("{prefix}/{i}/bias"), l.bias.len())?;
        l.bias.copy_from_slice(b);
    }
    Ok(())
}

fn put_buffer(ck: &mut Checkpoint, prefix: &str, buf: &RingBuffer<Transition>) {
    let items = buf.items();
    let n = items.len();
    let dim = items.first().map_or(0, |t| t.obs.len());
    ck.put_u64(&format!("{prefix}/meta"), vec![buf.capacity() as u64, buf.head() as u64, buf.inserted(), n as u64]);
    ck.put_f64(&format!("{prefix}/obs"), &[n, dim], items.iter().flat_map(|t| t.obs.iter().copied()).collect());
    ck.put_f64(&format!("{prefix}/next_obs"), &[n, dim], items.iter().flat_map(|t| t.next_obs.iter().copied()).collect());
    ck.put_f64(
        &format!("{prefix}/actions"),
        &[n, 4],
        items
            .iter()
            .flat_map(|t| {
                let h = t.a_h.unwrap_or([0.0, 0.0]);
                [t.a_g[0], t.a_g[1], h[0], h[1]]
            })
            .collect(),
    );
    ck.put_f64_vec(&format!("{prefix}/reward"), items.iter().map(|t| t.reward).collect());
    ck.put_u64(&format!("{prefix}/flags"), items.iter().map(|t| t.a_h.is_some() as u64 | (t.done as u64) << 1).collect());
}

fn get_buffer(ck: &Checkpoint, prefix: &str, dim: usize) -> Result<RingBuffer<Transition>> {
    let meta = ck.u64s_len(&format!("{prefix}/meta"), 4)?;
    let n = meta[3] as usize;
    let obs = ck.f64s_len(&format!("{prefix}/obs"), n * dim)?;
    let next = ck.f64s_len(&format!("{prefix}/next_obs"), n * dim)?;
    let act = ck.f64s_len(&format!("{prefix}/actions"), n * 4)?;
    let rew = ck.f64s_len(&format!("{prefix}/reward"), n)?;
    let flags = ck.u64s_len(&format!("{prefix}/flags"), n)?;
    let items = (0..n)
        .map(|i| Transition {
            obs: obs[i * dim..(i + 1) * dim].to_vec(),
            a_g: [act[4 * i], act[4 * i + 1]],
            a_h: (flags[i] & 1 == 1).then_some([act[4 * i + 2], act[4 * i + 3]]),
            reward: rew[i],
            next_obs: next[i * dim..(i + 1) * dim].to_vec(),
            done: flags[i] & 2 == 2,
        })
        .collect();
    RingBuffer::from_parts(meta[0] as usize, items, meta[1] as usize, meta[2]).ok_or_else(|| invalid(&format!("{prefix}/meta"), "inconsistent ring buffer layout"))
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Parses a per-step trace. Blank lines are skipped.
pub fn replay_reader<R: BufRead>(reader: R) -> impl Iterator<Item = std::result::Result<StepFrame, ReplayError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(ReplayError::Io(e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(|e| ReplayError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })),
    })
}

pub fn replay(path: &Path) -> std::result::Result<Vec<StepFrame>, ReplayError> {
    replay_reader(BufReader::new(File::open(path)?)).collect()
}

/// Per-episode reward sums of a trace, in episode order.
pub fn episode_returns(frames: &[StepFrame]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = Vec::new();
    for f in frames {
        match out.last_mut() {
            Some((ep, sum)) if *ep == f.episode => *sum += f.reward,
            _ => out.push((f.episode, f.reward)),
        }
    }
    out
}

impl From<DistError> for TrainError {
    fn from(e: DistError) -> Self {
        TrainError::Learn(LearnError::Dist(e))
    }
}

impl From<crate::agent::AgentError> for TrainError {
    fn from(e: crate::agent::AgentError) -> Self {
        TrainError::Learn(LearnError::Agent(e))
    }
}
