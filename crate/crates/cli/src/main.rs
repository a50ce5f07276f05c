//! `affwild` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use affwild::model::Head;
use affwild::train::{EvalMode, Freeze, LossKind};
use clap::{Args, Parser, Subcommand};

use settings::Flags;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "affwild",
    version,
    about = "Valence/arousal annotation processing and CNN-GRU training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample annotation traces, score annotator agreement and write final labels.
    AnnotateProcess {
        /// TOML annotation manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh model on a dataset manifest.
    Train {
        #[command(flatten)]
        io: DataIo,
        #[command(flatten)]
        knobs: TrainKnobs,
        /// Balance quadrants to these v+a+,v-a+,v+a-,v-a- proportions first.
        #[arg(long)]
        targets: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Score a checkpoint, or stored predictions, against dataset labels.
    Evaluate {
        #[command(flatten)]
        io: DataIo,
        /// Model checkpoint to run.
        #[arg(
            long,
            conflicts_with = "predictions",
            required_unless_present = "predictions"
        )]
        checkpoint: Option<PathBuf>,
        /// Directory of `<video>.pred` files.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        seqlen: Option<usize>,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[command(flatten)]
        io: DataIo,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        knobs: TrainKnobs,
        /// none or backbone (convolution layers stay fixed).
        #[arg(long)]
        freeze: Option<Freeze>,
        /// Replace the output head before training.
        #[arg(long)]
        head: Option<Head>,
    },
    /// Compare backpropagated gradients with central differences on one batch.
    Gradcheck {
        #[command(flatten)]
        io: DataIo,
        /// Checkpoint to check; without it a model is built from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seqlen: Option<usize>,
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// Duplicate segments until quadrant proportions reach the targets.
    Balance {
        #[command(flatten)]
        io: DataIo,
        /// v+a+,v-a+,v+a-,v-a- proportions (fractions or percentages).
        #[arg(long)]
        targets: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Segment length in frames.
        #[arg(long)]
        seqlen: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the annotation service on a loopback address.
    Serve {
        /// TOML annotation manifest listing the videos.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for journals and finished traces.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
        /// Static files of the browser client.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset in the manifest layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        videos: usize,
        #[arg(long, default_value_t = 240)]
        frames: usize,
        /// Square frame side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 68)]
        landmark_points: usize,
    },
}

#[derive(Args)]
struct DataIo {
    /// Dataset manifest (`affwild-dataset` TSV).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with flag defaults and a `[model]` table.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainKnobs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seqlen: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// ccc, mse or cross-entropy.
    #[arg(long)]
    loss: Option<LossKind>,
}

impl TrainKnobs {
    fn flags(self) -> Flags {
        Flags {
            seed: self.seed,
            lr: self.lr,
            batch: self.batch,
            seqlen: self.seqlen,
            epochs: self.epochs,
            loss: self.loss,
            ..Flags::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::AnnotateProcess { manifest, out } => commands::annotate_process(&manifest, &out),
        Command::Train {
            io,
            knobs,
            targets,
            tolerance,
        } => {
            let flags = Flags {
                targets,
                tolerance,
                ..knobs.flags()
            };
            commands::train(
                &io.manifest,
                &io.out,
                settings::Settings::resolve(flags, io.config.as_deref())?,
            )
        }
        Command::Evaluate {
            io,
            checkpoint,
            predictions,
            mode,
            seqlen,
        } => {
            let flags = Flags {
                mode,
                seqlen,
                ..Flags::default()
            };
            let s = settings::Settings::resolve(flags, io.config.as_deref())?;
            commands::evaluate(
                &io.manifest,
                &io.out,
                checkpoint.as_deref(),
                predictions.as_deref(),
                s,
            )
        }
        Command::Finetune {
            io,
            checkpoint,
            knobs,
            freeze,
            head,
        } => {
            let flags = Flags {
                freeze,
                head,
                ..knobs.flags()
            };
            let s = settings::Settings::resolve(flags, io.config.as_deref())?;
            commands::finetune(&io.manifest, &io.out, &checkpoint, s)
        }
        Command::Gradcheck {
            io,
            checkpoint,
            seed,
            batch,
            seqlen,
            loss,
        } => {
            let flags = Flags {
                seed,
                batch,
                seqlen,
                loss,
                ..Flags::default()
            };
            let s = settings::Settings::resolve(flags, io.config.as_deref())?;
            commands::gradcheck(&io.manifest, &io.out, checkpoint.as_deref(), s)
        }
        Command::Balance {
            io,
            targets,
            tolerance,
            seqlen,
            seed,
        } => {
            let flags = Flags {
                targets,
                tolerance,
                seqlen,
                seed,
                ..Flags::default()
            };
            let s = settings::Settings::resolve(flags, io.config.as_deref())?;
            commands::balance(&io.manifest, &io.out, s)
        }
        Command::Serve {
            manifest,
            out,
            addr,
            ui,
        } => commands::serve(&manifest, &out, &addr, ui),
        Command::Synth {
            out,
            seed,
            videos,
            frames,
            size,
            landmark_points,
        } => {
            let flags = Flags {
                seed,
                ..Flags::default()
            };
            let s = settings::Settings::resolve(flags, None)?;
            commands::synth(
                &out,
                s.seed,
                s.seed_source,
                videos,
                frames,
                size,
                landmark_points,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
