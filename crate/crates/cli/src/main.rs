//! Command-line entry points: dataset generation, training, evaluation,
//! and learning-curve export.
//!
//! Exit codes: 0 success, 1 validation (arguments, config, schemas),
//! 2 runtime (I/O, training failures).

mod config;
mod curve;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use nursesched::baselines::{GreedyNearestAgent, GreedySkillAgent, RandomAgent};
use nursesched::domain::{
    generate_roster, load_constraints, load_roster, save_constraints, save_roster, Roster,
};
use nursesched::env::EnvConfig;
use nursesched::ppo::{
    evaluate, load_policy_checkpoint, Agent, EvalMetrics, GreedyPolicyAgent, TrainError, Trainer,
    METRICS_HEADER,
};

use config::{resolve, FileConfig, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "nursesched",
    version,
    about = "Nurse-patient scheduling simulator with masked-PPO training",
    after_help = "The NURSESCHED_SEED environment variable supplies a default seed\nwhen neither --seed nor the config file set one."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate nurses.json and constraints.json datasets.
    GenData(GenDataArgs),
    /// Train the policy with PPO, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a policy or baseline over fixed-seed episodes.
    Eval(EvalArgs),
    /// Smooth a metrics file into a learning curve and report its trend.
    ExportCurve(ExportCurveArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Seed for the synthetic generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving nurses.json and constraints.json.
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    /// Number of nurses to generate.
    #[arg(long, default_value_t = 40)]
    count: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file (flags override its values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for parameters, environments, and shuffles.
    #[arg(long)]
    seed: Option<u64>,
    /// Total training epochs (one rollout + update cycle each).
    #[arg(long)]
    epochs: Option<usize>,
    /// Parallel environment rollouts per epoch.
    #[arg(long)]
    workers: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Roster file; synthesized from data_seed when omitted.
    #[arg(long)]
    nurses: Option<PathBuf>,
    /// Constraints file overriding the built-in defaults.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoints.
    #[arg(long, default_value = "nursesched_run")]
    out_dir: PathBuf,
    /// Continue from the newest checkpoint in --out-dir.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// greedy_skill | greedy_nearest | random | checkpoint:<path>
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file for the environment setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nurses: Option<PathBuf>,
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Write a JSON-lines step trace of every evaluated episode.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ExportCurveArgs {
    /// metrics.csv produced by train.
    #[arg(long)]
    metrics: PathBuf,
    /// Moving-average window in epochs.
    #[arg(long, default_value_t = 50)]
    window: usize,
    /// Output CSV path (epoch, reward, moving_average).
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        use nursesched::numcore::NumError;
        match &e {
            TrainError::Validation(_) | TrainError::Env(_) => CliError::Validation(e.to_string()),
            TrainError::Domain(d) => match d {
                nursesched::domain::DomainError::Io { .. } => CliError::Runtime(e.to_string()),
                _ => CliError::Validation(e.to_string()),
            },
            TrainError::Num(n) => match n {
                NumError::Io { .. } => CliError::Runtime(e.to_string()),
                NumError::Format(_) | NumError::Validation(_) => {
                    CliError::Validation(e.to_string())
                }
                _ => CliError::Runtime(e.to_string()),
            },
            TrainError::NonFiniteLoss { .. } | TrainError::Io { .. } => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<nursesched::domain::DomainError> for CliError {
    fn from(e: nursesched::domain::DomainError) -> CliError {
        CliError::from(TrainError::Domain(e))
    }
}

fn io_runtime(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("io error on {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportCurve(args) => cmd_export_curve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn effective_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var(config::SEED_ENV_VAR)
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p).map_err(CliError::Validation),
        None => Ok(FileConfig::default()),
    }
}

/// Roster from an explicit file, or synthesized from the data seed.
fn resolve_roster(rc: &RunConfig) -> Result<Roster, CliError> {
    match &rc.nurses {
        Some(path) => Ok(load_roster(path)?),
        None => Ok(generate_roster(rc.data_seed, 40, &rc.env.arrivals.region)?),
    }
}

fn apply_constraints_file(env: &mut EnvConfig, path: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(p) = path {
        env.constraints = load_constraints(p)?;
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.seed);
    let region = nursesched::domain::Region::default();
    let roster = generate_roster(seed, args.count, &region)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_runtime(&args.out_dir, e))?;
    let nurses_path = args.out_dir.join("nurses.json");
    let constraints_path = args.out_dir.join("constraints.json");
    save_roster(&roster, &nurses_path)?;
    save_constraints(&nursesched::domain::ConstraintConfig::default(), &constraints_path)?;
    println!(
        "wrote {} ({} nurses) and {}",
        nurses_path.display(),
        roster.len(),
        constraints_path.display()
    );
    Ok(())
}

/// Newest checkpoint in the run directory, judged by trainer epoch.
fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, CliError> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    for entry in entries {
        let entry = entry.map_err(|e| io_runtime(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if !name.ends_with(".bin") || !(name.starts_with("ckpt_") || name == "final.bin") {
            continue;
        }
        // A throwaway restore reads the epoch from the metadata.
        if let Ok(trainer) = Trainer::from_checkpoint(&path, Roster { nurses: vec![] }) {
            let epoch = trainer.epoch();
            if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                best = Some((epoch, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config)?;
    let flags = Overrides {
        seed: args.seed,
        epochs: args.epochs,
        workers: args.workers,
        lr: args.lr,
        nurses: args.nurses.clone(),
        constraints: args.constraints.clone(),
    };
    let mut rc = resolve(file, flags);
    apply_constraints_file(&mut rc.env, &rc.constraints.clone())?;

    let train_config = rc.train_config();
    train_config.validate()?;
    rc.env.validate().map_err(TrainError::from)?;
    rc.policy_config().validate().map_err(TrainError::from)?;

    let echo = serde_json::to_string_pretty(&rc)
        .map_err(|e| CliError::Runtime(format!("config echo: {e}")))?;
    println!("resolved configuration:\n{echo}");

    let roster = resolve_roster(&rc)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_runtime(&args.out_dir, e))?;
    let metrics_path = args.out_dir.join("metrics.csv");

    let (mut trainer, mut metrics_file) = if args.resume {
        let Some(ckpt) = latest_checkpoint(&args.out_dir)? else {
            return Err(CliError::Validation(format!(
                "--resume: no checkpoint found in {}",
                args.out_dir.display()
            )));
        };
        println!("resuming from {}", ckpt.display());
        let mut trainer = Trainer::from_checkpoint(&ckpt, roster)?;
        trainer.train_config.epochs = rc.epochs;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| io_runtime(&metrics_path, e))?;
        (trainer, file)
    } else {
        let trainer = Trainer::new(train_config, rc.env.clone(), rc.policy_config(), roster)?;
        let mut file =
            std::fs::File::create(&metrics_path).map_err(|e| io_runtime(&metrics_path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| io_runtime(&metrics_path, e))?;
        (trainer, file)
    };

    let total = trainer.train_config.epochs;
    trainer.train(&mut metrics_file, Some(&args.out_dir), |stats| {
        if stats.epoch == 1 || stats.epoch % 50 == 0 || stats.epoch == total {
            println!(
                "epoch {:>5}/{} reward {:>8.3} policy_loss {:>9.5} value_loss {:>10.3} entropy {:.4}",
                stats.epoch,
                total,
                stats.episodic_reward,
                stats.update.policy_loss,
                stats.update.value_loss,
                stats.update.entropy
            );
        }
    })?;
    println!(
        "done: {} epochs, metrics at {}, final checkpoint at {}",
        total,
        metrics_path.display(),
        args.out_dir.join("final.bin").display()
    );
    Ok(())
}

fn metrics_json(m: &EvalMetrics) -> serde_json::Value {
    serde_json::json!({
        "episodes": m.episodes,
        "mean_reward": m.mean_reward,
        "skill_match_rate": m.skill_match_rate,
        "mean_travel_km": m.mean_travel_km,
        "expirations": m.expirations,
        "mean_fatigue": m.mean_fatigue,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.seed);
    let file = load_file_config(&args.config)?;
    let flags = Overrides {
        seed: Some(seed),
        nurses: args.nurses.clone(),
        constraints: args.constraints.clone(),
        ..Overrides::default()
    };
    let rc = resolve(file, flags);

    // The checkpoint carries its own environment configuration; baselines
    // use the resolved one. A constraints file overrides either.
    let (mut agent, mut env_config): (Box<dyn Agent>, EnvConfig) = match args.policy.as_str() {
        "greedy_skill" => (Box::new(GreedySkillAgent), rc.env.clone()),
        "greedy_nearest" => (Box::new(GreedyNearestAgent), rc.env.clone()),
        "random" => (Box::new(RandomAgent::new(seed ^ 0x5eed)), rc.env.clone()),
        other => match other.strip_prefix("checkpoint:") {
            Some(path) => {
                let (policy, env) = load_policy_checkpoint(Path::new(path))?;
                (Box::new(OwnedGreedyAgent { policy }), env)
            }
            None => {
                return Err(CliError::Validation(format!(
                    "unknown policy {other:?}; valid names: greedy_skill, greedy_nearest, random, checkpoint:<path>"
                )))
            }
        },
    };
    apply_constraints_file(&mut env_config, &rc.constraints.clone())?;
    env_config.validate().map_err(TrainError::from)?;

    let roster = resolve_roster(&rc)?;
    let mut trace = args.trace.as_ref().map(|_| Vec::new());
    let metrics = evaluate(
        agent.as_mut(),
        &roster,
        &env_config,
        args.episodes,
        seed,
        trace.as_mut(),
    )?;

    if let (Some(path), Some(records)) = (&args.trace, &trace) {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).map_err(|e| {
                CliError::Runtime(format!("trace serialization: {e}"))
            })?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| io_runtime(path, e))?;
    }

    println!("policy:            {}", args.policy);
    println!("episodes:          {}", metrics.episodes);
    println!("mean reward:       {:.6}", metrics.mean_reward);
    println!("skill-match rate:  {:.6}", metrics.skill_match_rate);
    println!("mean travel (km):  {:.6}", metrics.mean_travel_km);
    println!("expirations:       {:.6}", metrics.expirations);
    println!("mean fatigue:      {:.6}", metrics.mean_fatigue);
    let json = serde_json::to_string(&metrics_json(&metrics))
        .map_err(|e| CliError::Runtime(format!("metrics serialization: {e}")))?;
    println!("{json}");
    Ok(())
}

/// Greedy agent that owns its policy (checkpoint evaluations).
struct OwnedGreedyAgent {
    policy: nursesched::policy::Policy,
}

impl Agent for OwnedGreedyAgent {
    fn choose(
        &mut self,
        state: &nursesched::env::EnvState,
    ) -> Result<nursesched::env::Action, TrainError> {
        GreedyPolicyAgent {
            policy: &self.policy,
        }
        .choose(state)
    }
}

fn cmd_export_curve(args: ExportCurveArgs) -> Result<(), CliError> {
    if args.window == 0 {
        return Err(CliError::Validation("window must be positive".into()));
    }
    let text = std::fs::read_to_string(&args.metrics)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", args.metrics.display())))?;
    let rows = curve::parse_metrics(&text).map_err(CliError::Validation)?;
    let points = curve::smooth(&rows, args.window);
    let slope = curve::trend_slope(&points);
    std::fs::write(&args.out, curve::to_csv(&points)).map_err(|e| io_runtime(&args.out, e))?;
    println!(
        "wrote {} ({} points, window {})",
        args.out.display(),
        points.len(),
        args.window
    );
    println!("slope={slope}");
    Ok(())
}
