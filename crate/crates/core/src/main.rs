use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use handover::bridge::BridgeServer;
use handover::train::{self, evaluate_driver, ExpertDriver, Mode, TrainConfig, Trainer, EVAL_SEED_BASE};

#[derive(Parser)]
#[command(name = "handover", version, about = "Human-in-the-loop driving policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no_confidence, no_share or dpvp_only
    #[arg(long)]
    mode: Option<Mode>,
    /// Directory for metrics, trace, evaluations and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch or resume.
    Train(RunArgs),
    /// Train with the operator bridge listening.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:8765")]
        listen: String,
    },
    /// Evaluate a checkpoint (or the scripted expert) on held-out scenarios.
    Eval {
        /// Omit to evaluate the scripted expert.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = EVAL_SEED_BASE)]
        seed: u64,
    },
    /// Re-emit a recorded step trace.
    Replay {
        path: PathBuf,
        /// Print every frame instead of a per-episode summary.
        #[arg(long)]
        frames: bool,
    },
    /// Run the gradient, confidence, propagation and critic oracle suites.
    Selftest,
}

type BoxError = Box<dyn std::error::Error>;

fn load_config(path: Option<&Path>) -> Result<TrainConfig, BoxError> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn trainer(args: &RunArgs) -> Result<Trainer, BoxError> {
    let mut t = match &args.checkpoint {
        Some(ck) => {
            let mut t = Trainer::load(ck)?;
            if let Some(c) = &args.config {
                t.set_total_steps(TrainConfig::load(c)?.total_steps);
            }
            t
        }
        None => {
            let mut cfg = load_config(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(m) = args.mode {
                cfg.mode = m;
            }
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    if let Some(dir) = &args.out {
        t.set_output_dir(dir, args.checkpoint.is_some())?;
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<bool, BoxError> {
    match cli.command {
        Command::Train(args) => {
            let mut t = trainer(&args)?;
            let report = t.run()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { run, listen } => {
            let mut t = trainer(&run)?;
            let server = BridgeServer::start(&listen)?;
            log::info!("bridge listening on {}", server.local_addr());
            t.attach_bridge(server.link());
            let report = t.run()?;
            server.shutdown();
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval {
            checkpoint,
            episodes,
            config,
            seed,
        } => {
            let stats = match checkpoint {
                Some(ck) => Trainer::load(&ck)?.evaluate(episodes, seed)?,
                None => {
                    let cfg = load_config(config.as_deref())?;
                    evaluate_driver(&mut ExpertDriver(cfg.expert), &cfg.env, episodes, seed)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Replay { path, frames } => {
            let steps = train::replay(&path)?;
            if frames {
                for f in &steps {
                    println!("{}", serde_json::to_string(f)?);
                }
            } else {
                for (ep, ret) in train::episode_returns(&steps) {
                    println!("episode {ep}: return {ret:.4}");
                }
                println!("{} steps", steps.len());
            }
        }
        Command::Selftest => {
            let mut ok = true;
            for s in handover::selftest::run_all() {
                println!("{s}");
                ok &= s.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
