//! `tacpeg` — the command-line surface of the tactile peg-in-hole pipeline.
//!
//! Four commands cover the whole workflow: `train` runs (or resumes) a
//! learning job, `eval` scores a checkpointed policy, `render` draws one
//! synthetic tactile frame for a given contact force, and `oracle` measures
//! the scripted spiral-search baseline. Every command is deterministic for a
//! fixed `--seed`, and all artifacts land under the directory the caller
//! names.
//!
//! Exit codes: 0 success; 2 usage, configuration or input-file problems;
//! 3 a training run aborted on a non-finite value (a crash checkpoint is
//! left behind).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tacpeg_core::env::{Ablation, EnvParams, InsertEnv};
use tacpeg_core::oracle::{measure_solvability, SpiralSearchController};
use tacpeg_core::rng::StreamRng;
use tacpeg_core::sim::{SimParams, TaskGeometry};
use tacpeg_core::tactile::{GelParams, GelRenderer};
use tacpeg_core::trainer::{
    resume, resume_with_config, train, RunConfig, Trainer, TrainerError,
};
use tacpeg_core::NetFloat;

#[derive(Parser)]
#[command(
    name = "tacpeg",
    version,
    about = "Tactile peg-in-hole insertion: simulator, world-model agent, and tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent (or resume a checkpointed run).
    Train(TrainArgs),
    /// Evaluate a checkpointed policy and print the report as JSON.
    Eval(EvalArgs),
    /// Render one synthetic tactile frame to a binary PPM file.
    Render(RenderArgs),
    /// Run the scripted spiral-search baseline and print its report.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file of dotted keys (e.g. {"train.batch": 8}); omitted
    /// keys keep their documented defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; overrides the config file (default: the config's seed,
    /// 0 if unset).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory for metrics, checkpoints and evaluation reports.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Observation part to blank out: none, no_tactile or no_proprio;
    /// overrides the config file (default: the config's ablation, none).
    #[arg(long, value_name = "MODE")]
    ablation: Option<String>,
    /// Resume this checkpoint instead of starting fresh; with --config the
    /// file must describe the same configuration.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Episodes to run.
    #[arg(long, value_name = "N", default_value_t = 20)]
    episodes: u32,
    /// Random seed for the evaluation streams.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// Contact force along x, newtons.
    #[arg(long, value_name = "F", default_value_t = 0.0, allow_negative_numbers = true)]
    fx: f64,
    /// Contact force along y, newtons.
    #[arg(long, value_name = "F", default_value_t = 0.0, allow_negative_numbers = true)]
    fy: f64,
    /// Contact force along z, newtons.
    #[arg(long, value_name = "F", default_value_t = 0.0, allow_negative_numbers = true)]
    fz: f64,
    /// Output PPM path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Episodes to run (at least 1).
    #[arg(long, value_name = "N", default_value_t = 100)]
    episodes: u64,
    /// Random seed for the environment.
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

/// An error already shaped for the shell: a message and an exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<TrainerError> for Failure {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::NonFinite { .. } => Self::numeric(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_json_str(&read_file(path)?)
            .map_err(|e| Failure::usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.ablation {
        cfg.env.ablation = mode.parse::<Ablation>().map_err(Failure::usage)?;
    }
    cfg.out_dir = args.out.clone();
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let explicit = args.config.is_some() || args.seed.is_some() || args.ablation.is_some();
    let summary = match &args.resume {
        Some(ckpt) if !explicit => resume::<NetFloat>(ckpt, &args.out)?,
        Some(ckpt) => resume_with_config::<NetFloat>(ckpt, load_config(&args)?)?,
        None => train::<NetFloat>(load_config(&args)?)?,
    };
    let line = serde_json::json!({
        "env_steps": summary.env_steps,
        "grad_steps": summary.grad_steps,
        "final_eval": summary.final_eval,
        "checkpoint": summary.checkpoint.display().to_string(),
    });
    println!("{line}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    // Evaluation writes nothing; the trainer's output directory is unused.
    let out = args.checkpoint.parent().map(Path::to_owned).unwrap_or_else(|| PathBuf::from("."));
    let trainer = Trainer::<NetFloat>::from_checkpoint(&args.checkpoint, out)?;
    let mut rng = StreamRng::root(args.seed).child("cli-eval");
    let report = trainer.evaluate(args.episodes, &mut rng)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<(), Failure> {
    let force = [args.fx, args.fy, args.fz];
    if force.iter().any(|f| !f.is_finite()) {
        return Err(Failure::usage("forces must be finite"));
    }
    let renderer = GelRenderer::new(GelParams::default())
        .map_err(|e| Failure::usage(format!("sensor calibration failed: {e}")))?;
    let frame = renderer.render(force);
    std::fs::write(&args.out, frame.ppm_bytes())
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", args.out.display())))?;
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    if args.episodes == 0 {
        return Err(Failure::usage("--episodes must be at least 1"));
    }
    let geom = TaskGeometry::default();
    let sim = SimParams::default();
    let mut env = InsertEnv::new(
        geom.clone(),
        sim.clone(),
        GelParams::default(),
        EnvParams::default(),
        StreamRng::root(args.seed).child("oracle"),
    )
    .map_err(|e| Failure::usage(e.to_string()))?;
    let mut controller = SpiralSearchController::new(&geom, &sim);
    let report = measure_solvability(&mut env, &mut controller, args.episodes);
    let line = serde_json::json!({
        "episodes": report.episodes,
        "successes": report.successes,
        "timeouts": report.timeouts,
        "exits": report.exits,
        "success_rate": report.success_rate(),
        "mean_steps_to_success": report.mean_steps_to_success,
    });
    println!("{}", serde_json::to_string_pretty(&line).expect("report serialises"));
    Ok(())
}
