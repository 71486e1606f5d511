use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fcdc::cli::{cmd_compare, cmd_run, cmd_validate, Overrides};

#[derive(Parser)]
#[command(name = "fcdc", version, about = "Feedback-controlled data collection from streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy over a stream and write its outputs.
    Run(Common),
    /// Run several policies over the same stream.
    Compare(Common),
    /// Check a config and print its resolved parameters.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the stream and the decision seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run(c) => cmd_run(&c.config, &c.overrides()),
        Command::Compare(c) => cmd_compare(&c.config, &c.overrides()),
        Command::Validate(c) => cmd_validate(&c.config, &c.overrides()),
    };
    ExitCode::from(code as u8)
}
