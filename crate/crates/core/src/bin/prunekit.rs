use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use prunekit::config::{parse_config, parse_rates, Overrides};
use prunekit::runner::{error_line, exit_code, resolve_output_dir, run_command, Command, RunRequest};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    /// Train a dense model from scratch
    Train,
    /// One pruning event on a checkpoint
    Prune,
    /// Masked fine-tuning of a pruned checkpoint
    Finetune,
    /// Iterative prune / fine-tune schedule
    Loop,
    /// Perplexity and accuracy of a checkpoint (or an untrained model)
    Eval,
    /// Pruning-rate sweep with per-seed fine-tuning
    Sweep,
    /// CSR sparse export of a masked checkpoint
    Export,
    /// Rebuild markdown tables from a sweep CSV
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Prune => Command::Prune,
            Cmd::Finetune => Command::Finetune,
            Cmd::Loop => Command::Loop,
            Cmd::Eval => Command::Eval,
            Cmd::Sweep => Command::Sweep,
            Cmd::Export => Command::Export,
            Cmd::Report => Command::Report,
        }
    }
}

/// Magnitude pruning experiments on a toy transformer.
#[derive(Debug, Parser)]
#[command(name = "prunekit", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON experiment config
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `prune.rate=0.5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (default: config output_dir, then $PRUNEKIT_OUT, then ./prunekit-out)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed list for the sweep (repeatable)
    #[arg(long = "seed", value_name = "N")]
    seeds: Vec<u64>,
    /// Sweep rates, comma separated
    #[arg(long, value_name = "CSV")]
    rates: Option<String>,
    /// Input checkpoint or CSV (default depends on the command)
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
}

fn run(cli: Cli) -> prunekit::Result<String> {
    let overrides = Overrides {
        set: cli.set,
        seeds: cli.seeds,
        rates: cli.rates.as_deref().map(parse_rates).transpose()?,
    };
    let config = parse_config(cli.config.as_deref(), &overrides)?;
    let out_dir = resolve_output_dir(cli.out.as_deref(), &config);
    let summary = run_command(&RunRequest {
        command: cli.command.into(),
        config,
        out_dir,
        input: cli.input,
    })?;
    Ok(summary.message)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
