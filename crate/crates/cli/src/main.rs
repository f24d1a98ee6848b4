//! `gnncert`: train, verify, simulate and transfer neural Lyapunov
//! certificates for networked systems.
//!
//! Exit codes: 0 success, 1 training stopped without a certificate, 2
//! verification failed, 3 aborted (budget, divergence, I/O), 64 usage or
//! config error, 65 checkpoint/config mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gnncert::system::ClosureMode;
use gnncert::verifier::InflationMode;
use gnncert::{Error, Result};

use commands::{Context, VerifyOverrides, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "gnncert", version, about = "Neural Lyapunov certificates for networked systems")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a candidate and write checkpoint, report and loss curve.
    Train,
    /// Grid-verify a checkpoint.
    Verify(VerifyArgs),
    /// Simulate trajectory pairs and their Lyapunov values.
    Simulate(SimulateArgs),
    /// Rebind a checkpoint to a ring of another size.
    Transfer(TransferArgs),
    /// Pretty-print a stored report.
    Report {
        /// Text or JSON report file.
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Strict,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ClosureArg {
    TwoHop,
    EmbedReference,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    epsilon_x: Option<f64>,
    #[arg(long)]
    epsilon_u: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    closure: Option<ClosureArg>,
    /// Condition evaluations allowed per class.
    #[arg(long)]
    budget: Option<u128>,
    /// Defaults to `<out>/checkpoint.txt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    pairs: usize,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    /// Without a checkpoint only trajectories are written.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    new_n: usize,
    /// Defaults to `<out>/checkpoint.txt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue training on the new graph.
    #[arg(long)]
    fine_tune: bool,
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    if let Command::Report { path } = &cli.command {
        return commands::report_cmd(path);
    }
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let ctx = Context::new(config, cli.out, cli.seed)?;
    match cli.command {
        Command::Train => commands::train_cmd(&ctx),
        Command::Verify(a) => commands::verify_cmd(
            &ctx,
            VerifyOverrides {
                epsilon_x: a.epsilon_x,
                epsilon_u: a.epsilon_u,
                mode: a.mode.map(|m| match m {
                    ModeArg::Strict => InflationMode::Strict,
                    ModeArg::Paper => InflationMode::Paper,
                }),
                closure: a.closure.map(|c| match c {
                    ClosureArg::TwoHop => ClosureMode::TwoHop,
                    ClosureArg::EmbedReference => ClosureMode::EmbedReference,
                }),
                budget: a.budget,
                checkpoint: a.checkpoint,
            },
        ),
        Command::Simulate(a) => commands::simulate_cmd(&ctx, a.pairs, a.horizon, a.checkpoint),
        Command::Transfer(a) => commands::transfer_cmd(&ctx, a.new_n, a.checkpoint, a.fine_tune),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
