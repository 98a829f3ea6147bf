use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pnest::sim::{
    emit_csv, emit_plot_data, emit_sample_series, run_report, ExperimentConfig, SimError,
};

/// Monte-Carlo phase-noise estimation experiments.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv plus .dat series files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides n_trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_file(path).map_err(|e| {
        eprintln!("config error: {}: {e}", path.display());
        ExitCode::from(CONFIG_ERROR)
    })
}

fn execute(cfg: &ExperimentConfig, out: &PathBuf, parallel: Option<usize>) -> Result<(), SimError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.unwrap_or(0))
        .build()
        .map_err(|e| SimError::Io {
            path: "thread pool".into(),
            message: e.to_string(),
        })?;
    let report = pool.install(|| run_report(cfg))?;
    std::fs::create_dir_all(out).map_err(|e| SimError::Io {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    emit_csv(&report.rows, out.join("results.csv"))?;
    emit_plot_data(&report.rows, out)?;
    emit_sample_series(&report.series, out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            out,
            seed,
            trials,
            parallel,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(t) = trials {
                cfg.n_trials = t;
            }
            if let Err(e) = cfg.validate() {
                eprintln!("config error: {e}");
                return ExitCode::from(CONFIG_ERROR);
            }
            match execute(&cfg, &out, parallel) {
                Ok(()) => ExitCode::SUCCESS,
                Err(SimError::Config(e)) => {
                    eprintln!("config error: {e}");
                    ExitCode::from(CONFIG_ERROR)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUNTIME_ERROR)
                }
            }
        }
    }
}
