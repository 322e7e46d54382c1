//! `wavft`: feature extraction, synthetic corpora, training, evaluation and
//! run comparison.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

mod commands;
mod config;
mod corpus;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// An input or configuration problem detected before (or instead of) doing
/// any work. Maps to exit code 1.
#[derive(Debug)]
pub struct Validation(pub String);

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Validation {}

#[derive(Parser)]
#[command(name = "wavft", version, about = "Semi-supervised acoustic model finetuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run config; layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base preset: desk or paper.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Raw override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args, Clone, Default)]
pub struct TrainOverrides {
    /// Cross-entropy weight on labelled batches.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Probability of drawing a labelled batch.
    #[arg(long)]
    pub p: Option<f64>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Cap unlabelled frames at this multiple of labelled frames.
    #[arg(long)]
    pub beta_limit: Option<f64>,
    /// Seed for batch kinds and shuffling.
    #[arg(long)]
    pub seed_data: Option<u64>,
    /// Seed for time masks and dropout.
    #[arg(long)]
    pub seed_mask: Option<u64>,
    /// Seed for distractor sampling.
    #[arg(long)]
    pub seed_distractor: Option<u64>,
    /// Seed for parameter initialisation.
    #[arg(long)]
    pub seed_init: Option<u64>,
    /// Conventional finetuning: p = 1, alpha = 1.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compute features for the WAV files listed in a manifest.
    Extract {
        /// Manifest of `id<TAB>wav[<TAB>labels]` lines.
        manifest: PathBuf,
        #[arg(long, env = "WAVFT_OUT")]
        out: PathBuf,
        /// Keep only energy-detected speech segments.
        #[arg(long)]
        vad: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic labelled/unlabelled/held-out corpus.
    Synth {
        #[arg(long, env = "WAVFT_OUT")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        labelled: Option<usize>,
        #[arg(long)]
        unlabelled: Option<usize>,
        #[arg(long)]
        held_out: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model.
    Train {
        /// Corpus directory written by `synth` or `extract`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, env = "WAVFT_OUT")]
        out: PathBuf,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Initial parameters (e.g. a seed model); optimizer starts fresh.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Frame accuracy of a checkpoint on a labelled manifest.
    Eval {
        checkpoint: PathBuf,
        /// Labelled manifest; defaults to the config's held-out manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Relative accuracy change from a baseline report to a candidate report.
    Compare { baseline: PathBuf, candidate: PathBuf },
    /// Alpha and beta grids over one corpus, trained concurrently.
    Sweep {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, env = "WAVFT_OUT")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,5")]
        betas: Vec<f64>,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract { manifest, out, vad, cfg } => commands::extract(&cfg, &manifest, &out, vad),
        Command::Synth {
            out,
            seed,
            labelled,
            unlabelled,
            held_out,
            cfg,
        } => commands::synth(&cfg, &out, seed, labelled, unlabelled, held_out),
        Command::Train {
            corpus,
            out,
            resume,
            init,
            overrides,
            cfg,
        } => commands::train(&cfg, &overrides, corpus.as_deref(), &out, resume.as_deref(), init.as_deref()),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            cfg,
        } => commands::eval(&cfg, &checkpoint, manifest.as_deref(), out.as_deref()),
        Command::Compare { baseline, candidate } => commands::compare(&baseline, &candidate),
        Command::Sweep {
            corpus,
            out,
            alphas,
            betas,
            overrides,
            cfg,
        } => commands::sweep(&cfg, &overrides, corpus.as_deref(), &out, &alphas, &betas),
    }
}

/// 1 for validation failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Validation>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<wavft::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
