//! `recite-ctc`: prepare datasets, train, decode, evaluate and diff
//! transcripts.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "recite-ctc", version, about = "CNN-BiGRU-CTC recognizer for Quranic recitation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with [features], [model], [train] and [decode] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub fft_size: Option<usize>,
    #[arg(long, global = true)]
    pub hop_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a manifest from a dataset tree and split it.
    Prepare {
        dataset_root: PathBuf,
        out_dir: PathBuf,
        /// Fail with exit code 2 if any clip is rejected.
        #[arg(long)]
        strict: bool,
        /// Split by reciter instead of by clip.
        #[arg(long)]
        by_reciter: bool,
    },
    /// Train a model and write checkpoints and a log.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Transcribe a WAV file or every clip of a manifest.
    Decode {
        checkpoint: PathBuf,
        input: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Write records here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a manifest and score it against its transcripts.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error analysis of two id-aligned transcript files (`id<TAB>text`).
    Diff {
        reference: PathBuf,
        hypothesis: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Best-path decoding instead of beam search.
    #[arg(long)]
    pub greedy: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let data_quality = err.downcast_ref::<CliError>().is_some_and(CliError::is_data_quality);
            ExitCode::from(if data_quality { 2 } else { 1 })
        }
    }
}
