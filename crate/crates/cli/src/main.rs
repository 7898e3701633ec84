mod commands;
mod config;
mod outdir;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags or config: exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(
    name = "speechbridge",
    version,
    about = "Train and evaluate speech-to-LM projectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. CLI flags override the config file, which
/// overrides built-in defaults.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created atomically.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides every seed the command uses.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue in an existing output directory, skipping finished stages.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpora listed under `synth.corpora`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Sample a duration-budgeted subset of a manifest.
    Subset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Hour budget.
        #[arg(long)]
        hours: f64,
    },
    /// Train a projector from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Also train LoRA adapters on the LM's query and value maps.
        #[arg(long)]
        lora: bool,
    },
    /// Continue training a pretrained projector on target-language data.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pretrained_ckpt: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Relabel the finetuning data with this language code.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long)]
        lora: bool,
    },
    /// Transcribe a manifest to JSON Lines.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// LoRA adapter file saved next to the checkpoint.
        #[arg(long)]
        lora: Option<PathBuf>,
        /// Prompt language for every utterance.
        #[arg(long)]
        lang: Option<String>,
    },
    /// Score a checkpoint on labeled test manifests.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest; repeatable. Defaults to `data.tests`.
        #[arg(long = "test")]
        tests: Vec<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        lora: Option<PathBuf>,
        /// Training hours shown in the row label.
        #[arg(long)]
        hours: Option<f64>,
    },
    /// Merge `report.json` files into one grid.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train from scratch at several budgets and plot WER against hours.
    ScalingSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets, ascending.
        #[arg(long, value_delimiter = ',')]
        hours: Option<Vec<f64>>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Pretrain on each source, finetune on the target at each budget.
    BootstrapMatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        hours: Option<Vec<f64>>,
        #[arg(long)]
        beam: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use speechbridge::error::Error;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.root() {
                Error::NonFiniteLoss { .. } => 4,
                Error::InvalidInput(_) | Error::MissingSlot(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
