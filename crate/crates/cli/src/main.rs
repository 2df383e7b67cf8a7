use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynemu_cli::commands;
use dynemu_cli::files::Sampling;
use dynemu_cli::{config, CliResult};

#[derive(Parser)]
#[command(name = "dynemu", version, about = "Dynamic emulation of ODE simulation models")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "dynemu.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample design parameter sets.
    Design {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "uniform")]
        sampling: Sampling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full model for every design.
    Simulate {
        #[arg(long)]
        designs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the full state.
        #[arg(long)]
        full_state: bool,
    },
    /// Condition the emulator on design runs.
    Condition {
        #[arg(long)]
        designs: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        artifact: Option<PathBuf>,
        /// Report path; defaults to `<artifact>.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emulate one or more parameter sets.
    Emulate {
        #[arg(long)]
        artifact: PathBuf,
        /// A designs file or a comma-separated parameter set.
        #[arg(long)]
        params: String,
        #[arg(long)]
        variance: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare emulations with full-model runs on held-out sets.
    Validate {
        #[arg(long)]
        artifact: PathBuf,
        /// Held-out sets; drawn from the ranges when absent.
        #[arg(long)]
        params: Option<String>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the emulation step over a sweep of grid lengths and design counts.
    Bench {
        /// e.g. `N=20,63,200;n=5,16,50;fixed_n=20;fixed_N=200;reps=5`
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic forcing CSV from the model config's generator settings.
    Forcing {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mid-range pilot run; prints soil storage statistics as JSON.
    Pilot,
}

fn run(cli: Cli) -> CliResult<String> {
    let cfg = &cli.config;
    Ok(match cli.command {
        Command::Design { n, seed, sampling, out } => {
            commands::cmd_design(cfg, n, seed, sampling, out.as_deref())?.display().to_string()
        }
        Command::Simulate { designs, out, full_state } => {
            commands::cmd_simulate(cfg, &designs, out.as_deref(), full_state)?.display().to_string()
        }
        Command::Condition { designs, runs, artifact, out } => {
            let r = commands::cmd_condition(cfg, &designs, &runs, artifact.as_deref(), out.as_deref())?;
            format!("{} (Σ′ dimension {}, jitter {})", r.artifact.display(), r.sigma_dim, r.jitter)
        }
        Command::Emulate { artifact, params, variance, out } => {
            commands::cmd_emulate(cfg, &artifact, &params, variance, out.as_deref())?.display().to_string()
        }
        Command::Validate { artifact, params, n, seed, out } => {
            let r = commands::cmd_validate(cfg, &artifact, params.as_deref(), n, seed, out.as_deref())?;
            format!(
                "median d-value {} (prior {}), {} sets",
                r.summary.median_d_value, r.summary.median_prior_d_value, r.summary.n_sets
            )
        }
        Command::Bench { sweep, seed, out } => {
            let r = commands::cmd_bench(cfg, sweep.as_deref(), seed, out.as_deref())?;
            format!("slope vs N {:.3}, slope vs n {:.3}", r.slope_vs_n_steps, r.slope_vs_n_design)
        }
        Command::Forcing { n, seed, out } => commands::cmd_forcing(cfg, None, n, seed, &out)?.display().to_string(),
        Command::Pilot => {
            let loaded = config::load(cfg)?;
            serde_json::to_string_pretty(&commands::pilot(&loaded)?).expect("plain struct")
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
