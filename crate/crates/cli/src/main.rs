//! `dxrank`: generate data, build training instances, train, evaluate and
//! predict.
//!
//! All commands share a run directory (`--out-dir`). A command reads its
//! inputs from `DATA_DIR` (defaulting to the run directory) and writes its
//! outputs plus a `manifest-<command>.json` into the run directory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dxrank", version, about = "Next-visit diagnosis prediction")]
pub struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed relevant to the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Memorize,
    Diagnose,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ontology and patient records.
    Gen,
    /// Split patients and build memorization and diagnosis instances.
    Build {
        /// Directory holding ontology.tsv and records.jsonl.
        data_dir: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Starting checkpoint; required for the diagnosis stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Allow the diagnosis stage without a memorization checkpoint.
        #[arg(long)]
        allow_cold_start: bool,
        /// Directory produced by `build`.
        data_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Recall cut-offs, comma separated.
        #[arg(long, default_value = "10,20", value_delimiter = ',')]
        k: Vec<usize>,
        data_dir: Option<PathBuf>,
    },
    /// Predict the next visit for one patient record (JSON).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// File holding a single patient record.
        record: PathBuf,
        /// Directory holding ontology.tsv.
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
