use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use refcomp_core::config::RunConfig;
use refcomp_core::pipeline::{self, EvalPolicy, TrainStart};
use refcomp_core::{Error, Result};

/// Learned reference correction for a simulated flexible-joint arm.
#[derive(Parser, Debug)]
#[command(name = "refcomp", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the configured output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the baseline over a fresh corpus; store the dynamics dataset and
    /// error statistics.
    Collect,
    /// Fit the dynamics model and pretrain an agent inside it.
    Pretrain,
    /// Train on the simulated arm.
    Train {
        /// Start from an agent file, e.g. the pretrained agent.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue from the last checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the baseline or an agent on the held-out test corpus.
    Eval {
        /// Agent file, or `baseline`.
        #[arg(long, default_value = "baseline")]
        policy: String,
        /// Tip payload in kg; defaults to the configured fraction of the
        /// last link mass.
        #[arg(long)]
        payload: Option<f64>,
        /// Name used in output files.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Aggregate the runs under the run directory.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Collect => "collect",
            Command::Pretrain => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Report => "report",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir.as_path();
    match command {
        Command::Collect => {
            let s = pipeline::collect(cfg, out)?;
            println!("collected {} samples from {} trajectories", s.samples, s.trajectories);
        }
        Command::Pretrain => {
            let s = pipeline::pretrain(cfg, out)?;
            let first = s.loss_history.first().copied().unwrap_or(f64::NAN);
            let last = s.loss_history.last().copied().unwrap_or(f64::NAN);
            println!(
                "dynamics loss {first:.6} -> {last:.6} after {} epochs; {} pretraining episodes",
                s.loss_history.len() - 1,
                s.logs.len()
            );
        }
        Command::Train { init, resume } => {
            let start = match (init, resume) {
                (_, true) => TrainStart::Resume,
                (Some(path), false) => TrainStart::From(path.clone()),
                (None, false) => TrainStart::Random,
            };
            let s = pipeline::train(cfg, out, &start)?;
            let tail = &s.logs[s.logs.len().saturating_sub(cfg.counts.best_window)..];
            let reward = tail.iter().map(|l| l.mean_reward).sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "trained {} episodes; mean reward of the last {}: {reward:.4}",
                s.logs.len(),
                tail.len()
            );
        }
        Command::Eval { policy, payload, tag } => {
            let policy = if policy == "baseline" {
                EvalPolicy::Baseline
            } else {
                EvalPolicy::Agent(PathBuf::from(policy))
            };
            let payload = payload.unwrap_or_else(|| cfg.payload_for_fraction(cfg.eval.payload_fraction));
            let r = pipeline::eval(cfg, out, &policy, payload, tag.as_deref())?;
            println!(
                "{}: e_q {:.5} ± {:.5}, ee {:.5} ± {:.5} over {} trajectories",
                r.tag,
                r.e_q.mean,
                r.e_q.std,
                r.ee_error.mean,
                r.ee_error.std,
                r.per_trajectory.len()
            );
        }
        Command::Report => {
            let s = pipeline::report(out)?;
            println!(
                "aggregated {} runs over {} episodes and {} evaluation summaries",
                s.runs.len(),
                s.episodes,
                s.eval_files
            );
        }
    }
    Ok(())
}

fn write_error_json(dir: &Path, command: &str, err: &Error) {
    let body = serde_json::json!({
        "command": command,
        "kind": err.kind(),
        "message": err.to_string(),
    });
    let written =
        std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join("error.json"), format!("{body:#}\n")));
    if let Err(e) = written {
        eprintln!("could not write error.json: {e}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_defaults {
        match RunConfig::default().to_toml_string() {
            Ok(text) => {
                print!("{text}");
                return ExitCode::SUCCESS;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no command given; see --help");
        return ExitCode::from(2);
    };
    // Failures before the configuration is known go to the --out directory.
    let (result, dir) = match load_config(&cli) {
        Ok(cfg) => (run(command, &cfg), cfg.output_dir),
        Err(e) => (
            Err(e),
            cli.out.clone().unwrap_or_else(|| RunConfig::default().output_dir),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            write_error_json(&dir, command.name(), &e);
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
