//! `fader` command-line tool.

// `!(x > 0.0)` style guards deliberately reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fader::attenuation::ScalingMode;

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration (exit 2).
    #[error("{0}")]
    Usage(String),
    /// A required artifact does not exist (exit 3).
    #[error("{0}")]
    Missing(String),
    /// Anything that failed while running (exit 4).
    #[error(transparent)]
    Runtime(#[from] fader::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Runtime(_) | CliError::Io { .. } => 4,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

#[derive(Parser)]
#[command(
    name = "fader",
    version,
    about = "Reconstruction-based anomaly detection with feature attenuation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Backbone,
    Fader,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scaling {
    Nearest,
    Bilinear,
}

impl From<Scaling> for ScalingMode {
    fn from(s: Scaling) -> Self {
        match s {
            Scaling::Nearest => ScalingMode::Nearest,
            Scaling::Bilinear => ScalingMode::Bilinear,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy dataset into `data.root`.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the backbone or the FADeR stage; resumes from an existing checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score the test split and write a report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained backbone without attenuation.
        #[arg(long)]
        no_fader: bool,
        /// Binary instead of soft patch masks.
        #[arg(long, conflicts_with = "no_fader")]
        hard_mask: bool,
        /// Attenuate with an all-ones mask (an identity check).
        #[arg(long, conflicts_with = "hard_mask")]
        force_ones: bool,
        #[arg(long, value_enum)]
        scaling: Option<Scaling>,
    },
    /// Write input, binary-mask, soft-mask and anomaly-map PNGs for one image.
    Visualize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask, used by the oracle mask provider.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::SynthData { config, force } => commands::synth_data(&config, force),
        Command::Train {
            config,
            stage,
            stop_after,
        } => commands::train(&config, stage, stop_after),
        Command::Eval {
            config,
            no_fader,
            hard_mask,
            force_ones,
            scaling,
        } => commands::eval(
            &config,
            commands::EvalFlags {
                no_fader,
                hard_mask,
                force_ones,
                scaling: scaling.map(Into::into),
            },
        ),
        Command::Visualize { config, image, gt } => commands::visualize(&config, &image, gt.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
