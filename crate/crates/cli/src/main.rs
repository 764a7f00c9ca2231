use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lfhj_cli::{exit_code, run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "lfhj", version, about = "Lax-Friedrichs experiments for periodic conservation laws and Hamilton-Jacobi equations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Step u or v from the initial data and write snapshots.
    Solve,
    /// Find the time-periodic state and its effective Hamiltonian.
    Periodic,
    /// Effective Hamiltonian over a range of shifts.
    Sweep,
    /// Mesh-convergence study against a reference solution.
    Converge,
    /// Minimizing random walk from one node.
    Walk,
    /// Long-run bounds over many periods.
    Stability,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Solve => Command::Solve,
            Cmd::Periodic => Command::Periodic,
            Cmd::Sweep => Command::Sweep,
            Cmd::Converge => Command::Converge,
            Cmd::Walk => Command::Walk,
            Cmd::Stability => Command::Stability,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let command: Command = cli.command.into();
    if cli.verbose {
        eprintln!("{} with {} threads into {}", command.name(), pool.current_num_threads(), cli.out.display());
    }
    match pool.install(|| run(command, &cfg, &cli.out)) {
        Ok(summary) => {
            print!("{}", summary.table());
            if cli.verbose {
                for f in &summary.files {
                    eprintln!("wrote {f}");
                }
            }
            ExitCode::from(if summary.passed { 0 } else { 3 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
