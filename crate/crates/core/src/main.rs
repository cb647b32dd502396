use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfstop::harness::{report_line, run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mfstop", version, about = "Multiple optimal stopping of interacting particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate particle paths under a stopping rule.
    Simulate(Common),
    /// Solve the cascade and write the value table.
    Solve(Common),
    /// Estimate the objective of the optimal policy.
    PolicyEval(Common),
    /// Propagation-of-chaos experiment.
    Chaos(Common),
    /// Value convergence along a doubling ladder.
    Converge(Common),
    /// Compare projection derivatives with finite differences.
    CheckDerivatives(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config worker count.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::PolicyEval(a) => (Command::PolicyEval, a),
        Cmd::Chaos(a) => (Command::Chaos, a),
        Cmd::Converge(a) => (Command::Converge, a),
        Cmd::CheckDerivatives(a) => (Command::CheckDerivatives, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command, args: Common) -> mfstop::Result<()> {
    let (mut config, text) = ExperimentConfig::load(&args.config)?;
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| mfstop::Error::config("threads", e.to_string()))?;
    }
    // The seed is part of the run identity even when given on the command line.
    let identity = match args.seed {
        Some(s) => format!("{text}\n--seed {s}"),
        None => text,
    };
    let manifest = run(&config, &identity, command, &args.out)?;
    report_line(&manifest, std::io::stdout())?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}
