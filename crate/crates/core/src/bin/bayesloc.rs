use std::path::PathBuf;
use std::process::ExitCode;

use bayesloc::cli::{cmd_oracle, cmd_replay, cmd_simulate, Overrides};
use clap::{Parser, Subcommand};

/// Bayesian RSS localization with iterative prior refinement.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Output directory, overriding `output.directory`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Base seed, overriding `campaign.base_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replicate count, overriding `campaign.replications`.
    #[arg(long, global = true)]
    replications: Option<usize>,
    /// Write every round's raw chain draws.
    #[arg(long, global = true)]
    dump_draws: bool,
    /// Suppress progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run closed-loop campaigns on simulated measurements.
    Simulate { config: PathBuf },
    /// Check the sampler against an exact grid posterior.
    Oracle { config: PathBuf },
    /// Estimate from recorded measurements.
    Replay { csv: PathBuf, config: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides {
        output_dir: args.output_dir,
        seed: args.seed,
        replications: args.replications,
        dump_draws: args.dump_draws,
        quiet: args.quiet,
    };
    let result = match &args.command {
        Command::Simulate { config } => cmd_simulate(config, &overrides),
        Command::Oracle { config } => cmd_oracle(config, &overrides),
        Command::Replay { csv, config } => cmd_replay(csv, config, &overrides),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
