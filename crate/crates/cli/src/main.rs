use std::path::PathBuf;
use std::process::ExitCode;

use atomtune::experiment::{self, AnalyzeKind, Command, ExperimentConfig, EXIT_OK, EXIT_RUNTIME};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "atomtune", version, about = "Sparse dictionary fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate Fourier signal batches or synthetic digits.
    GenData(Common),
    /// Pre-train or fine-tune a model.
    Run(Common),
    /// Run an analysis.
    Analyze {
        #[arg(value_enum)]
        kind: Kind,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cost,
    Influence,
    SelectAtoms,
    Duel,
    ExpansionVerify,
    Sweep,
}

impl From<Kind> for AnalyzeKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Cost => AnalyzeKind::Cost,
            Kind::Influence => AnalyzeKind::Influence,
            Kind::SelectAtoms => AnalyzeKind::SelectAtoms,
            Kind::Duel => AnalyzeKind::Duel,
            Kind::ExpansionVerify => AnalyzeKind::ExpansionVerify,
            Kind::Sweep => AnalyzeKind::Sweep,
        }
    }
}

fn main() -> ExitCode {
    let (command, common) = match Cli::parse().command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Run(c) => (Command::Run, c),
        Cmd::Analyze { kind, common } => (Command::Analyze(kind.into()), common),
    };
    let result = ExperimentConfig::load(command, &common.config, common.out, common.seed)
        .and_then(|cfg| experiment::execute(&cfg));
    let code = match result {
        Ok(outcome) => match outcome.failure {
            None => {
                println!("{}: ok ({} files)", command.name(), outcome.manifest.files.len());
                EXIT_OK
            }
            Some(f) => {
                eprintln!("{}: partial output, {f}", command.name());
                EXIT_RUNTIME
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            experiment::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
