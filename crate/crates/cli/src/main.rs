use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sctfusion_cli::commands::{self, SweepOptions, SweepOutcome};
use sctfusion_cli::config::{parse_override, RunConfig};
use sctfusion_cli::{exit_code, EXIT_CONFIG};
use sctfusion_core::Result;

#[derive(Parser)]
#[command(name = "sctfusion", version, about = "Synthetic CT from CBCT with optional CT fusion")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a scalar config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom dataset.
    Phantom,
    /// Write misaligned CTs and their affine parameters.
    Misalign,
    /// Train grid cells.
    Train {
        /// Comma-separated cell ids; all cells when omitted.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
    },
    /// Recompute test metrics from checkpoints.
    Eval,
    /// Write tables, plots and slice images.
    Report,
    /// Run everything end to end.
    Sweep {
        /// Print the planned cells and exit.
        #[arg(long)]
        dry_run: bool,
        /// Number of worker processes for grid cells.
        #[arg(long, default_value_t = 1)]
        parallel_cells: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    let overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let path = cli
        .config
        .clone()
        .ok_or_else(|| sctfusion_core::Error::Config("--config is required".into()))?;
    let cfg = RunConfig::load(&path, &overrides)?;
    match cli.command {
        Cmd::Phantom => println!("{}", commands::cmd_phantom(&cfg)?.display()),
        Cmd::Misalign => println!("{}", commands::cmd_misalign(&cfg)?.display()),
        Cmd::Train { cells } => {
            let s = commands::cmd_train(&cfg, cells.as_deref())?;
            println!("trained {} cell(s), skipped {} finished", s.ran.len(), s.skipped.len());
        }
        Cmd::Eval => println!("{}", commands::cmd_eval(&cfg)?.display()),
        Cmd::Report => {
            for f in commands::cmd_report(&cfg)? {
                println!("{}", f.display());
            }
        }
        Cmd::Sweep { dry_run, parallel_cells } => {
            let opts = SweepOptions {
                dry_run,
                parallel_cells,
                worker_exe: std::env::current_exe().ok(),
                config_path: Some(path),
                overrides,
            };
            match commands::cmd_sweep(&cfg, &opts)? {
                SweepOutcome::Planned(cells) => {
                    for (id, done) in cells {
                        println!("{id}\t{}", if done { "done" } else { "pending" });
                    }
                }
                SweepOutcome::Completed { ran, skipped, report } => {
                    println!("ran {ran} cell(s), skipped {skipped}");
                    for f in report {
                        println!("{}", f.display());
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
