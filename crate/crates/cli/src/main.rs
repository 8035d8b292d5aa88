mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "highmmt",
    version,
    about = "Multimodal multitask experiments on synthetic benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Involvement,
    Interference,
    Attention,
    Params,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic datasets listed under `data`.
    GenData(Common),
    /// Train on every configured task.
    Train(Common),
    /// Pretrain on source tasks, then fine-tune on a target.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Single-task vs multitask training on a fraction of the target data.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Train architecture variants (all seven when no variant is given).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Involvement, interference, attention or parameter reports.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Kind,
        /// Model to analyze; defaults to the train command's best checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train(c) => commands::train(&c),
        Command::Transfer {
            common,
            sources,
            target,
        } => commands::transfer(&common, sources, target),
        Command::Fewshot { common, p } => commands::fewshot(&common, p),
        Command::Ablate { common, variant } => commands::ablate(&common, variant.as_deref()),
        Command::Analyze {
            common,
            kind,
            checkpoint,
        } => commands::analyze(&common, kind, checkpoint),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        match cause.downcast_ref::<highmmt_core::Error>() {
            Some(highmmt_core::Error::Config(_)) => return 2,
            Some(highmmt_core::Error::Numeric(_)) => return 3,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
