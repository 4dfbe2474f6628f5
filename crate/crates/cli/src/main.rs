use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Spatio-temporal graph trajectory prediction with kinematic decoding.
#[derive(Debug, Parser)]
#[command(name = "stgdat", version, about)]
struct Cli {
    /// Worker threads (count); 1 gives bit-reproducible results.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    threads: usize,

    /// Master seed (integer); every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0, value_name = "SEED")]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut recordings into train/val/test windows and build context maps.
    Preprocess(PreprocessArgs),
    /// Simulate interactive vehicle scenes with ground truth.
    GenSynthetic(GenSyntheticArgs),
    /// Train a model on preprocessed windows.
    Train(TrainArgs),
    /// Sample trajectory forecasts from a checkpoint.
    Predict(PredictArgs),
    /// Track targets with a learned or linear process model.
    Track(TrackArgs),
    /// Score forecasts against recorded trajectories.
    Eval(EvalArgs),
    /// Compare loss gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Trajectory CSV files or directories of them (path).
    #[arg(long, required = true, num_args = 1.., value_name = "PATH")]
    pub input: Vec<PathBuf>,
    /// Output directory for windows, maps and manifest (path).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Run config JSON supplying horizons, step and map cell size (path).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Location of every recording (name); default is each file's parent directory name.
    #[arg(long, value_name = "NAME")]
    pub location: Option<String>,
    /// Seconds per CSV frame id (s).
    #[arg(long, default_value_t = 0.1, value_name = "SECONDS")]
    pub frame_dt: f64,
    /// Steps between window starts (steps).
    #[arg(long, default_value_t = 10, value_name = "STEPS")]
    pub stride: usize,
    /// Train, validation and test fractions (unitless, comma separated).
    #[arg(long, default_value = "0.7,0.1,0.2", value_name = "F,F,F")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Scene layout: highway, intersection or roundabout.
    #[arg(long, default_value = "intersection", value_name = "KIND")]
    pub archetype: String,
    /// Number of scenes (count).
    #[arg(long, default_value_t = 200, value_name = "N")]
    pub scenes: usize,
    /// Vehicles per scene (count).
    #[arg(long, default_value_t = 6, value_name = "N")]
    pub agents: usize,
    /// Steps per scene (steps).
    #[arg(long, default_value_t = 60, value_name = "STEPS")]
    pub steps: usize,
    /// Step length (s).
    #[arg(long, default_value_t = 0.1, value_name = "SECONDS")]
    pub dt: f64,
    /// Position observation noise standard deviation (m).
    #[arg(long, default_value_t = 0.05, value_name = "METERS")]
    pub noise: f64,
    /// Output directory; a subdirectory named after the archetype is created (path).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config JSON with `model` and `train` sections (path).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory written by `preprocess` (path).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and manifest (path).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override the epoch count (epochs).
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint JSON written by `train` (path).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Windows JSON from `preprocess` or a trajectory CSV (path).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Context map directory; defaults to `maps/` next to a windows file (path).
    #[arg(long, value_name = "DIR")]
    pub maps: Option<PathBuf>,
    /// Trajectory sets per window (count).
    #[arg(long, default_value_t = 20, value_name = "K")]
    pub k: usize,
    /// Vehicle uncertainty: gaussian or mc.
    #[arg(long, default_value = "gaussian", value_name = "MODE")]
    pub mode: String,
    /// Particles per vehicle and draw in mc mode (count).
    #[arg(long, default_value_t = 100, value_name = "N")]
    pub particles: usize,
    /// Decode the prior mean instead of prior draws (requires --k 1).
    #[arg(long)]
    pub zero_latent: bool,
    /// Seconds per CSV frame id when the input is a CSV (s).
    #[arg(long, default_value_t = 0.1, value_name = "SECONDS")]
    pub frame_dt: f64,
    /// Steps between window starts when the input is a CSV (steps).
    #[arg(long, default_value_t = 10, value_name = "STEPS")]
    pub stride: usize,
    /// Output JSON (path).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Scene files: synthetic scene JSON (with truth) or trajectory CSV (path).
    #[arg(long, required = true, num_args = 1.., value_name = "FILE")]
    pub input: Vec<PathBuf>,
    /// Process model: model, cvm, cam or all.
    #[arg(long, default_value = "all", value_name = "MODE")]
    pub mode: String,
    /// Checkpoint for model mode (path).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Context map directory for model mode (path).
    #[arg(long, value_name = "DIR")]
    pub maps: Option<PathBuf>,
    /// Tracker config JSON (measurement noise, process noise, occlusions) (path).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// First occluded step (steps).
    #[arg(long, value_name = "STEP")]
    pub occlusion_start: Option<usize>,
    /// Occlusion length (steps).
    #[arg(long, default_value_t = 10, value_name = "STEPS")]
    pub occlusion_len: usize,
    /// Position measurement noise standard deviation (m).
    #[arg(long, value_name = "METERS")]
    pub measurement_std: Option<f64>,
    /// Held-out scene files to tune process noise on before tracking (path).
    #[arg(long, num_args = 1.., value_name = "FILE")]
    pub tune_on: Vec<PathBuf>,
    /// Seconds per CSV frame id for CSV inputs (s).
    #[arg(long, default_value_t = 0.1, value_name = "SECONDS")]
    pub frame_dt: f64,
    /// Output report JSON (path).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Forecast JSON written by `predict` (path).
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Ground-truth trajectory CSV (path).
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,
    /// Seconds per CSV frame id (s).
    #[arg(long, default_value_t = 0.1, value_name = "SECONDS")]
    pub frame_dt: f64,
    /// Optional score JSON (path).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Ablation to check: T, T+C-ATT, T+C, T+C+K or all.
    #[arg(long, default_value = "all", value_name = "NAME")]
    pub ablation: String,
    /// Finite-difference half step (parameter units); entries off by 1e-5 or more are retried at a tenth of it.
    #[arg(long, default_value_t = 1e-5, value_name = "H")]
    pub h: f64,
    /// Largest accepted relative error (unitless).
    #[arg(long, default_value_t = 1e-4, value_name = "TOL")]
    pub tolerance: f64,
    /// Adam steps before the check (steps).
    #[arg(long, default_value_t = 60, value_name = "STEPS")]
    pub warmup_steps: usize,
    /// Optional report JSON (path).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Exit status: 0 success, 1 invalid input, 2 runtime failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<stgdat_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.downcast_ref::<commands::Invalid>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::NotFound) {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    let ctx = commands::Context {
        seed: cli.seed,
        threads: cli.threads,
    };
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(&ctx, a),
        Command::GenSynthetic(a) => commands::gen_synthetic(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Track(a) => commands::track(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::GradCheck(a) => commands::grad_check(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
