//! `dualvla` command line.
//!
//! Exit codes:
//!
//! | code | meaning                                                       |
//! |------|---------------------------------------------------------------|
//! | 0    | success                                                       |
//! | 1    | unexpected internal failure                                   |
//! | 2    | usage or configuration error (`E_USAGE`, `E_CONFIG`)          |
//! | 3    | contract or format violation (`E_CONTRACT`, `E_FORMAT`, ...)  |
//! | 4    | file system error (`E_IO`)                                    |
//! | 5    | non-finite loss during training (`E_NONFINITE`)               |
//! | 6    | dataset generation failure (`E_GENERATION`, `E_HORIZON`)      |
//!
//! Failures print exactly one line to stderr: `<CODE>: <message>`.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualvla::Error;

#[derive(Parser)]
#[command(name = "dualvla", version, about = "Dual-branch VLA training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Run config file (`key = value` lines); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to load; defaults to the run's final checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate on this dataset file instead of the run's own data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Episodes per evaluation split (0 = all).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file and its manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file to write; the manifest goes next to it.
        #[arg(long, default_value = "data/dataset.jsonl")]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<usize>,
        #[arg(long = "eval-alpha")]
        eval_alpha: Option<usize>,
        /// Training episodes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Task rule: `cue` or `uniform`.
        #[arg(long)]
        rule: Option<String>,
        /// Hold out a background for a shifted evaluation split.
        #[arg(long, conflicts_with = "no_ood")]
        ood: bool,
        #[arg(long = "no-ood")]
        no_ood: bool,
    },
    /// Train a model; writes config, metrics and checkpoints to `out_dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress per-step progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Success rates with and without language on every evaluation split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Instruction NLL, corpus information measures and success rates.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// Second run to compare instruction NLL against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `lambda`, `beta` or `k`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
    /// Write a run's metrics as CSV and an SVG chart.
    Plot {
        /// Run directory; its metrics stream is plotted.
        #[arg(long, required_unless_present = "metrics")]
        run: Option<PathBuf>,
        /// Metrics file, instead of `--run`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// SVG output; defaults to `metrics.svg` beside the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error carried to `main`: a stable code plus a one-line message.
#[derive(Debug)]
pub struct Failure {
    pub code: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: "E_USAGE",
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.code {
            "E_USAGE" | "E_CONFIG" => 2,
            "E_CONTRACT" | "E_FORMAT" | "E_DIMENSION" | "E_INDEX" | "E_LENGTH" => 3,
            "E_IO" => 4,
            "E_NONFINITE" => 5,
            "E_GENERATION" | "E_HORIZON" => 6,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(&Failure::usage(first.trim_start_matches("error: ")));
        }
    };
    let result = match cli.command {
        Command::GenData {
            cfg,
            out,
            alpha,
            eval_alpha,
            n,
            seed,
            rule,
            ood,
            no_ood,
        } => {
            let ood = if ood {
                Some(true)
            } else if no_ood {
                Some(false)
            } else {
                None
            };
            commands::gen_data(&cfg, &out, alpha, eval_alpha, n, seed, rule, ood)
        }
        Command::Train { cfg, resume, quiet } => commands::train(&cfg, resume, quiet),
        Command::Eval { run } => commands::eval(&run),
        Command::Diagnose { run, baseline } => commands::diagnose(&run, baseline.as_deref()),
        Command::Sweep { cfg, axis, values } => commands::sweep(&cfg, &axis, &values),
        Command::Plot { run, metrics, out } => commands::plot(run.as_deref(), metrics.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let message = f.message.replace(['\n', '\r'], " ");
    eprintln!("{}: {message}", f.code);
    ExitCode::from(f.exit_code())
}
