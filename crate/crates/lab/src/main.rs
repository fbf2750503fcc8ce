use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hra_lab::{commands, ExperimentConfig};

#[derive(Parser)]
#[command(name = "hra-lab", version, about = "Train and measure hierarchical recurrent adapters on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config; writes checkpoint, report.json and loss.csv.
    Train(ConfigArgs),
    /// Evaluate the run's checkpoint on every task's test split.
    Eval(ConfigArgs),
    /// Closed-form shared / per-task / total adapter size.
    CountParams(ConfigArgs),
    /// Adapter size against task count for N = 1..growth.n_max.
    GrowthCurve(ConfigArgs),
    /// Recurrence/sharing x controller-variant matrix.
    Ablate(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set adapter.rank=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, cmd): (&ConfigArgs, fn(&ExperimentConfig) -> hra_lab::Result<String>) = match &cli.command {
        Command::Train(a) => (a, commands::train),
        Command::Eval(a) => (a, commands::eval),
        Command::CountParams(a) => (a, commands::count_params),
        Command::GrowthCurve(a) => (a, commands::growth_curve),
        Command::Ablate(a) => (a, commands::ablate),
    };
    let result = ExperimentConfig::load(args.config.as_deref(), &args.sets).and_then(|cfg| cmd(&cfg));
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hra-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
