use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use avgspde::error::{Result, SimError};
use avgspde::experiments::{
    run_expansion, run_fbar, run_mixing, run_simulate, run_weak_order, ExperimentConfig, RunMode,
};
use avgspde::integrators::SimKind;

/// Simulation and experiment driver for two-time-scale stochastic
/// reaction-diffusion systems on an interval.
#[derive(Parser)]
#[command(name = "avgspde", version, about)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Write the CSV output here instead of the config's `out` / stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the run mode from the config.
    #[arg(long, global = true, value_enum)]
    mode: Option<CliMode>,

    /// Worker threads (default: all cores). The AVGSPDE_THREADS environment
    /// variable overrides this flag.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Mc,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliKind {
    Coupled,
    Averaged,
    Frozen,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write the terminal field(s) as CSV.
    Simulate {
        #[arg(long, value_enum, default_value = "coupled")]
        kind: CliKind,
    },
    /// Ergodic estimate of the averaged drift against the closed form.
    Fbar,
    /// Mixing gap curve of the frozen fast process with a fitted decay rate.
    Mixing {
        /// Monte-Carlo paths for the curve.
        #[arg(long, default_value_t = 20_000)]
        paths: usize,
        /// Step size for the frozen process.
        #[arg(long, default_value_t = 0.01)]
        step: f64,
    },
    /// Weak-error study across the config's eps grid with a fitted order.
    WeakOrder,
    /// Expansion-residual table from the Gaussian oracle.
    Expansion,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| SimError::Config("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        config.sim.seed = seed;
    }
    if let Some(mode) = cli.mode {
        config.mode = match mode {
            CliMode::Mc => RunMode::Mc,
            CliMode::Gaussian => RunMode::Gaussian,
        };
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn install_thread_pool(cli: &Cli) -> Result<()> {
    let threads = match std::env::var("AVGSPDE_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            SimError::Config(format!("AVGSPDE_THREADS must be an integer, got {v:?}"))
        })?),
        Err(_) => cli.threads,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(SimError::Config("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| SimError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn emit(config: &ExperimentConfig, csv: &str) -> Result<()> {
    match &config.out {
        Some(path) => {
            std::fs::write(path, csv)?;
        }
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<i32> {
    install_thread_pool(cli)?;
    let config = load_config(cli)?;
    match &cli.command {
        Command::Simulate { kind } => {
            let kind = match kind {
                CliKind::Coupled => SimKind::Coupled,
                CliKind::Averaged => SimKind::Averaged,
                CliKind::Frozen => SimKind::Frozen,
            };
            let csv = run_simulate(&config, kind)?;
            emit(&config, &csv)?;
            Ok(0)
        }
        Command::Fbar => {
            let csv = run_fbar(&config)?;
            emit(&config, &csv)?;
            Ok(0)
        }
        Command::Mixing { paths, step } => {
            let outcome = run_mixing(&config, *paths, *step)?;
            emit(&config, &outcome.to_csv())?;
            println!("{}", outcome.summary_line());
            match outcome.fit {
                Ok(_) => Ok(0),
                Err(e) => Err(e),
            }
        }
        Command::WeakOrder => {
            let report = run_weak_order(&config)?;
            emit(&config, &report.to_csv())?;
            println!("{}", report.summary_line());
            if report.inconclusive() {
                eprintln!("weak-order study inconclusive: no usable rows above the noise floor");
                Ok(3)
            } else {
                Ok(0)
            }
        }
        Command::Expansion => {
            let csv = run_expansion(&config)?;
            emit(&config, &csv)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
