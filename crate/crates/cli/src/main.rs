//! `volflow`: command-line front end for the volumetric flow-matching
//! pipeline.
//!
//! Every run is a pure function of its inputs and the seed: the same
//! command on the same files produces byte-identical outputs. Exit codes:
//! 0 on success, 1 on a runtime failure (missing file, numerical failure),
//! 2 on a usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "volflow",
    version,
    about = "Cascaded flow-matching synthesis of volumetric density from partial surfaces",
    propagate_version = true
)]
struct Cli {
    /// Worker thread budget (also read from VOLFLOW_THREADS). The compute
    /// kernels currently run on a single thread, so any accepted value
    /// yields identical results; the flag reserves the interface.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cohort of synthetic subjects and write a manifest.
    GenCohort {
        /// Output directory; receives manifest.jsonl plus one directory of
        /// volumes per subject.
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of subjects; defaults to n_train + n_test from the config.
        #[arg(long)]
        n: Option<usize>,
        /// Master seed; defaults to the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one cascade stage on the first n_train manifest subjects.
    Train {
        /// Cascade stage to train: 1 (surface completion), 2 (coarse
        /// density), or 3 (patch super-resolution).
        #[arg(long)]
        stage: u8,
        /// Cohort directory containing manifest.jsonl.
        #[arg(long)]
        cohort: PathBuf,
        /// Output directory for the checkpoint and loss log.
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from <out>/stage<K>.ckpt instead of initializing fresh
        /// weights. The result is bitwise identical to a run that was never
        /// interrupted.
        #[arg(long)]
        resume: bool,
    },
    /// Run the full cascade on one subject and write every intermediate.
    Sample {
        /// Cohort directory containing manifest.jsonl.
        #[arg(long)]
        cohort: PathBuf,
        /// Subject id from the manifest.
        #[arg(long)]
        subject: String,
        /// Directory holding stage1.ckpt, stage2.ckpt, stage3.ckpt.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Output directory; receives <subject>/{f_full,coarse_hu,high_hu}.vol3
        /// and run.json.
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sampling seed; defaults to the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare generated volumes against ground truth over the held-out
    /// split and write the anatomical report.
    Evaluate {
        /// Cohort directory containing manifest.jsonl.
        #[arg(long)]
        cohort: PathBuf,
        /// Directory of per-subject generated volumes (as written by
        /// `sample`).
        #[arg(long)]
        generated: PathBuf,
        /// Output directory for report.csv and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the whole pipeline end to end: cohort, three training stages,
    /// held-out sampling, and the report.
    Experiment {
        /// Output directory for all artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Inspect or validate configuration files.
    Config {
        /// Print the default configuration as TOML and exit.
        #[arg(long)]
        print_defaults: bool,
        /// Parse and validate the given configuration file.
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var("VOLFLOW_THREADS") {
            Ok(s) => Some(s.parse::<usize>().map_err(|_| {
                CliError::Usage(format!("VOLFLOW_THREADS must be a positive integer, got {s:?}"))
            })?),
            Err(_) => None,
        },
    };
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }

    match cli.command {
        Command::GenCohort { out, config, n, seed } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::gen_cohort(&cfg, n, seed, &out)
        }
        Command::Train { stage, cohort, out, config, resume } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::train(&cfg, stage, &cohort, &out, resume)
        }
        Command::Sample { cohort, subject, checkpoints, out, config, seed } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::sample(&cfg, &cohort, &subject, &checkpoints, seed, &out)
        }
        Command::Evaluate { cohort, generated, out, config } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::evaluate(&cfg, &cohort, &generated, &out)
        }
        Command::Experiment { out, config } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::experiment(&cfg, &out)
        }
        Command::Config { print_defaults, check } => {
            commands::config_cmd(print_defaults, check.as_deref())
        }
    }
}
