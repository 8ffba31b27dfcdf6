//! `rcps`: phantom synthesis, training, evaluation, inference and plots.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcps_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "rcps", version, about = "Semi-supervised 3D segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a deterministic phantom dataset with a held-out test split
    MakePhantoms(MakePhantomsArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and write a metrics CSV
    Eval(EvalArgs),
    /// Predict label volumes for standalone images
    Infer(InferArgs),
    /// Render training curves, schedules and segmentation overlays
    Plot(PlotArgs),
}

#[derive(Args)]
struct MakePhantomsArgs {
    /// Labeled training volumes
    #[arg(long, default_value_t = 4)]
    labeled: usize,
    /// Unlabeled training volumes
    #[arg(long, default_value_t = 36)]
    unlabeled: usize,
    /// Held-out labeled test volumes
    #[arg(long, default_value_t = 10)]
    test: usize,
    /// Phantom generator seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration supplying the [phantom] section
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing manifest.toml
    #[arg(long)]
    data: PathBuf,
    /// Directory that receives the run directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory name (defaults to a timestamp)
    #[arg(long)]
    run_name: Option<String>,
    /// Continue training from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Flag-level hyperparameter overrides; precedence is flags over config file
/// over built-in defaults.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight cap for the rectified pseudo supervision loss
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight cap for the bidirectional contrastive loss
    #[arg(long)]
    beta: Option<f64>,
    /// Pseudo-target sharpening temperature
    #[arg(long = "temp-t")]
    temp_t: Option<f64>,
    /// Contrastive softmax temperature
    #[arg(long = "temp-tau")]
    temp_tau: Option<f64>,
    /// Negative bank capacity per anchor class
    #[arg(long)]
    negatives: Option<usize>,
    /// Cubic training patch edge (also sets the eval window)
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// Fraction of labelled cases to keep; the rest join the unlabeled pool
    #[arg(long)]
    labeled_ratio: Option<f64>,
    /// Baseline mode: ignore unlabeled data and unsupervised losses
    #[arg(long)]
    supervised_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; metrics cover its test split
    #[arg(long)]
    data: PathBuf,
    /// Output directory (defaults to the checkpoint's directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run configuration; its network section must match the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    /// Save predicted label volumes next to the CSV
    #[arg(long)]
    save_preds: bool,
    /// Report distances in millimetres instead of voxels
    #[arg(long)]
    spacing_aware: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input NIfTI volumes
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run configuration supplying the [window] section
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Training log CSV; produces loss_curves.svg and schedules.svg
    #[arg(long)]
    log: Option<PathBuf>,
    /// Volume for a mid-slice overlay (needs --pred, optionally --gt)
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

/// Applies flag overrides on top of a loaded (or default) config.
fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(v) = o.seed {
        cfg.train.seed = v;
        cfg.phantom.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.alpha {
        cfg.train.alpha_max = v;
    }
    if let Some(v) = o.beta {
        cfg.train.beta_max = v;
    }
    if let Some(v) = o.temp_t {
        cfg.train.temperature_t = v;
    }
    if let Some(v) = o.temp_tau {
        cfg.train.contrastive.tau = v;
    }
    if let Some(v) = o.negatives {
        cfg.train.contrastive.negatives = v;
    }
    if let Some(v) = o.patch_size {
        cfg.train.patch_size = [v; 3];
        cfg.window.patch_size = [v; 3];
    }
    if let Some(v) = o.lr0 {
        cfg.train.lr0 = v;
    }
    if let Some(v) = o.labeled_ratio {
        cfg.labeled_ratio = Some(v);
    }
    if o.supervised_only {
        cfg.train.supervised_only = true;
    }
}

/// Relative outputs land under `$RCPS_OUTPUT_ROOT` when it is set.
fn resolve_out(path: &std::path::Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("RCPS_OUTPUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_config(path: &Option<PathBuf>) -> rcps_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MakePhantoms(args) => commands::make_phantoms(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Infer(args) => commands::infer(args),
        Command::Plot(args) => commands::plot(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
