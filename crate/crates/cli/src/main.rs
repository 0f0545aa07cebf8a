//! `gazekit`: every pipeline stage as a subcommand.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "gazekit", version, about = "Compact gaze estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Seed {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic eye-image dataset with a manifest.
    Synth(SynthArgs),
    /// Distill a student from a teacher by masked feature reconstruction.
    Distill(DistillArgs),
    /// Generalized adapter training.
    Train(TrainArgs),
    /// Five-shot personalization of stage-4 adapters.
    Personalize(PersonalizeArgs),
    /// Angular error report over a manifest.
    Eval(EvalArgs),
    /// Predict `pitch,yaw` in radians for one image.
    Predict(PredictArgs),
    /// Gaze-directed detection over a prediction grid, as JSON lines.
    Detect(DetectArgs),
    /// Batch-1 forward latency.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    #[arg(long, default_value_t = 500)]
    per_subject: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Extra subjects with atypical anatomy, placed in the personal split.
    #[arg(long, default_value_t = 1)]
    personal: usize,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    /// Teacher weights; a seed-initialized teacher is used when omitted.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.6)]
    mask_ratio: f32,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Resize images to this square side.
    #[arg(long)]
    resolution: Option<usize>,
    /// Per-step loss terms as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Write a resumable checkpoint here when done.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written by `--checkpoint`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `key=value` training configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct PersonalizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Manifest holding the subject's images; the first five are the shots
    /// and the rest are scored before and after.
    #[arg(long)]
    personal: PathBuf,
    /// Manifest whose train split is replayed and whose val split measures
    /// forgetting.
    #[arg(long)]
    replay: PathBuf,
    #[arg(long)]
    subject: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    replay_r: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Only records of this split (train, val, test, personal).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    resolution: Option<usize>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Gaze point `X,Y` in pixels.
    #[arg(long)]
    gaze: String,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    iou: f32,
    #[arg(long, default_value_t = 0.25)]
    score: f32,
    /// Pixels per cell; read from the grid file when omitted.
    #[arg(long)]
    stride: Option<usize>,
    #[command(flatten)]
    seed: Seed,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Second model to compare against the first.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-run timings of the first model.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    seed: Seed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
