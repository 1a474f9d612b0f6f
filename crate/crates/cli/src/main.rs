use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::{Settings, SettingsError};

#[derive(Parser, Debug)]
#[command(name = "mkpn", version, about = "Burst denoising with multi-size kernel prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a frozen test set of noisy bursts.
    Synth(SynthArgs),
    /// Train a model on synthetic bursts.
    Train(TrainArgs),
    /// Denoise stored bursts and write PNG panels.
    Denoise(DenoiseArgs),
    /// Score a checkpoint on one or more test sets.
    Eval(EvalArgs),
    /// Time naive against fused reconstruction.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key = value config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Kernel sizes, e.g. 1,3,5.
    #[arg(long)]
    kernels: Option<String>,
    /// Burst length N.
    #[arg(long)]
    burst: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["1", "2", "4", "8"])]
    gain: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Folder of source images; procedural scenes when absent.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    /// Checkpoint to resume from.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Test set(s) scored every `eval_every` steps.
    #[arg(long)]
    testset: Option<PathBuf>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// Test-set directory or a single stored burst file.
    #[arg(long)]
    testset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["naive", "fused"])]
    mode: Option<String>,
    /// Maximum number of bursts to process.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    testset: PathBuf,
    #[arg(long, value_parser = ["naive", "fused"])]
    mode: Option<String>,
    /// Directory for the per-sample CSV and summary table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Kernel-size set to time; repeat for several sets.
    #[arg(long = "kernels-set")]
    kernel_sets: Vec<String>,
    #[arg(long)]
    extent: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<SettingsError> for Failure {
    fn from(e: SettingsError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<mkpn::Error> for Failure {
    fn from(e: mkpn::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Settings, Failure> {
    let mut s = Settings::defaults();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    let flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("kernel_sizes", common.kernels.clone()),
        ("burst_len", common.burst.map(|v| v.to_string())),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    Ok(s)
}

fn path_string(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => {
            let s = resolve(
                &a.common,
                &[
                    ("gain", a.gain.clone()),
                    ("count", a.count.map(|v| v.to_string())),
                    ("patch", a.patch.map(|v| v.to_string())),
                    ("images", path_string(&a.images)),
                ],
            )?;
            commands::synth(&s, &a.out)
        }
        Command::Train(a) => {
            let s = resolve(
                &a.common,
                &[
                    ("steps", a.steps.map(|v| v.to_string())),
                    ("patch", a.patch.map(|v| v.to_string())),
                    ("images", path_string(&a.images)),
                ],
            )?;
            commands::train(&s, &a.out, a.ckpt.as_deref(), a.testset.as_deref())
        }
        Command::Denoise(a) => {
            let s = resolve(
                &a.common,
                &[("mode", a.mode.clone()), ("count", a.count.map(|v| v.to_string()))],
            )?;
            commands::denoise(&s, &a.ckpt, &a.testset, &a.out, a.count)
        }
        Command::Eval(a) => {
            let s = resolve(&a.common, &[("mode", a.mode.clone())])?;
            commands::eval(&s, &a.ckpt, &a.testset, a.out.as_deref())
        }
        Command::Bench(a) => {
            let sets = if a.kernel_sets.is_empty() {
                a.common.kernels.clone()
            } else {
                Some(a.kernel_sets.join(";"))
            };
            let s = resolve(
                &a.common,
                &[
                    ("kernel_sets", sets),
                    ("extent", a.extent.map(|v| v.to_string())),
                    ("reps", a.reps.map(|v| v.to_string())),
                ],
            )?;
            commands::bench(&s, a.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `mkpn --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
