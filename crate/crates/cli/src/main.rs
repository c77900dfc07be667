//! `seld`: synthesise scenes, extract features, train the audio teacher and the
//! audio-visual student, and evaluate checkpoints or prediction files.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "seld",
    version,
    about = "Audio-visual sound event localization and detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute acoustic feature caches for every clip in a directory.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Recompute caches even when they are newer than the audio.
        #[arg(long)]
        force: bool,
    },
    /// Write a synthetic dataset of Ambisonics scenes with labels and keypoints.
    Synth(SynthArgs),
    /// Train the audio-only teacher.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Distil the frozen teacher into the audio-visual student.
    TrainStudent {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Distillation terms to enable.
        #[arg(long, value_parser = ["none", "rkd", "fkd", "both"])]
        kd: Option<String>,
        /// Mixing method (none, mixup, lossmix, manifoldmixup, pointmix, cutmix, cutlossmix, patchmix).
        #[arg(long)]
        mix: Option<String>,
    },
    /// Score a checkpoint or a directory of prediction files against labelled clips.
    Evaluate(EvalArgs),
    /// Write only the reliability data of a checkpoint or prediction files.
    ReportCalibration(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 3)]
    events: usize,
    /// Number of sound classes; 0 and 1 are the speech classes.
    #[arg(long, default_value_t = 13)]
    classes: usize,
    /// Diffuse noise level relative to a unit source at 1 m.
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
    /// Omit the diffuse noise field.
    #[arg(long)]
    clean: bool,
    /// Encode with SN3D dipole weighting instead of unit gain.
    #[arg(long)]
    sn3d: bool,
    #[arg(long, default_value = "classnoise", value_parser = ["classnoise", "broadband", "tone"])]
    signal: String,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory of clips (`*.wav`, `*.labels.csv`, optional `*.keypoints.csv`).
    #[arg(long)]
    data: PathBuf,
    /// Feature cache directory written by `extract`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// INI-style configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set mix.alpha=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Single-threaded float64 verification mode.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(
        long,
        required_unless_present = "predictions",
        conflicts_with = "predictions"
    )]
    ckpt: Option<PathBuf>,
    /// Directory of `<clip>.events.csv` files to score instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `2023` or `2024`; defaults to the checkpoint's mode (or 2023 for prediction files).
    #[arg(long)]
    task_mode: Option<String>,
    #[arg(long)]
    n_classes: Option<usize>,
    /// Class-wise (macro) instead of pooled (micro) averaging.
    #[arg(long = "macro")]
    macro_avg: bool,
    #[arg(long)]
    f64: bool,
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
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
