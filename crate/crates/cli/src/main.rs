mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use resdiff::rdt::Ablation;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub err: anyhow::Error,
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn kind(self, kind: Kind) -> Outcome<T>;
    fn config(self) -> Outcome<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Config)
    }
    fn data(self) -> Outcome<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Data)
    }
    fn numeric(self) -> Outcome<T>
    where
        Self: Sized,
    {
        self.kind(Kind::Numeric)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> Outcome<T> {
        self.map_err(|e| Failure { kind, err: e.into() })
    }
}

#[derive(Parser, Debug)]
#[command(name = "resdiff", version, about = "Radar respiration reconstruction with residual diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus into a dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser on a simulated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write (default: paths.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Number of epochs, overriding the config.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct the waveforms of a segment table.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Segment table (CSV with y_* and optional x_* columns).
        #[arg(long)]
        input: PathBuf,
        /// Reconstructions CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Reverse steps (default: diffusion.sample_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Also write one SVG per segment next to the output.
        #[arg(long)]
        plot: bool,
    },
    /// Score a checkpoint, the band-pass baseline or the oracle on the test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present_any = ["baseline", "oracle"])]
        ckpt: Option<PathBuf>,
        /// Dataset directory (default: paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report JSON to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, conflicts_with = "oracle")]
        baseline: Option<Baseline>,
        /// Sample with a denoiser that returns the ground truth.
        #[arg(long)]
        oracle: bool,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArg {
    None,
    V1,
    V2,
    V3,
    V4,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::V1 => Ablation::V1,
            AblationArg::V2 => Ablation::V2,
            AblationArg::V3 => Ablation::V3,
            AblationArg::V4 => Ablation::V4,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Bpf,
}

fn init_threads() -> Outcome {
    let Ok(v) = std::env::var("RESDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow::anyhow!("RESDIFF_THREADS must be a positive integer, got {v:?}"))
        .config()?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().kind(Kind::Config)
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    match cli.command {
        Command::Simulate { common, out } => commands::simulate(&common, out),
        Command::Train { common, data, out, ablation, epochs, resume } => {
            commands::train(&common, data, out, ablation.map(Into::into), epochs, resume)
        }
        Command::Reconstruct { common, ckpt, input, out, steps, plot } => {
            commands::reconstruct(&common, &ckpt, &input, &out, steps, plot)
        }
        Command::Evaluate { common, ckpt, data, out, steps, baseline, oracle } => {
            let mode = match (baseline, oracle, ckpt) {
                (Some(Baseline::Bpf), ..) => commands::EvalMode::Bpf,
                (None, true, _) => commands::EvalMode::Oracle,
                (None, false, Some(ckpt)) => commands::EvalMode::Model(ckpt),
                (None, false, None) => unreachable!("clap requires --ckpt"),
            };
            commands::evaluate(&common, mode, data, &out, steps)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.kind as u8)
        }
    }
}
