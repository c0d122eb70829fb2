use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pavi::pavi::Scheme;
use pavi_cli::{cmd_compare, cmd_gen_data, cmd_param_count, cmd_sanity, cmd_train, resolve, CliError, Overrides};

/// Plate-amortized variational inference experiments.
///
/// Every flag can also be set through an environment variable with the
/// `PAVI_` prefix, e.g. `PAVI_SEED=3`.
#[derive(Debug, Parser)]
#[command(name = "pavi", version = pavi_cli::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true, env = "PAVI_CONFIG")]
    config: Option<PathBuf>,
    /// Training seed (data seed for `gen-data`).
    #[arg(long, global = true, env = "PAVI_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "PAVI_OUT")]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true, env = "PAVI_QUIET")]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one scheme; writes trace.csv, checkpoint.bin and manifest.json.
    Train {
        /// Scheme to train instead of the first configured one.
        #[arg(long, env = "PAVI_SCHEME", value_parser = parse_scheme)]
        scheme: Option<Scheme>,
    },
    /// Train every configured series; writes compare.csv and compare.svg.
    Compare,
    /// Check a GRE posterior against the analytic one; writes sanity.json and sanity.svg.
    Sanity,
    /// Tabulate weight counts across plate cards; writes param_counts.csv.
    ParamCount,
    /// Draw a GRE dataset; writes data.bin and data.json.
    GenData,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown scheme {s:?}; expected pavi_f, pavi_e, pavi_e_sa or baseline"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    let config = resolve(
        cli.config.as_deref(),
        &overrides,
        matches!(cli.command, Command::GenData),
    )?;
    let quiet = overrides.quiet;
    match cli.command {
        Command::Train { scheme } => cmd_train(&config, scheme, quiet).map(drop),
        Command::Compare => cmd_compare(&config, quiet).map(drop),
        Command::Sanity => cmd_sanity(&config, quiet).map(drop),
        Command::ParamCount => cmd_param_count(&config, quiet).map(drop),
        Command::GenData => cmd_gen_data(&config, quiet).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
