//! `chantrack`: run the channel learning and tracking experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.
//! Log verbosity follows `CHANTRACK_LOG` (default `warn`).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chantrack_core::harness::{emit_outputs, run_experiment, ConfigPatch, ExperimentConfig, Scenario};
use chantrack_core::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "chantrack", version, about = "Sparse channel learning and tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV and plot data.
    Run(Overrides),
    /// Print the available scenarios.
    ListScenarios,
    /// Resolve and check a configuration, then print it as JSON.
    ValidateConfig(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated SNR values in dB.
    #[arg(long, value_delimiter = ',')]
    snr: Option<Vec<f64>>,
    /// Comma-separated bit depths; 0 means no quantization.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<u32>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use N = 128, M = 32 instead of the desk-scale sizes.
    #[arg(long)]
    paper_scale: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let file = match &self.config {
            Some(path) => ConfigPatch::from_file(path)?,
            None => ConfigPatch::default(),
        };
        let cli = ConfigPatch {
            scenario: self.scenario,
            seed: self.seed,
            snr_db: self.snr.clone(),
            bits: self.bits.clone(),
            num_trials: self.trials,
            out: self.out.clone(),
            paper_scale: self.paper_scale.then_some(true),
            ..ConfigPatch::default()
        };
        file.merged(cli).resolve()
    }
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn config_failure(e: Error) -> Failure {
    Failure::Config(e.into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::ListScenarios => {
            for s in Scenario::ALL {
                println!("{:<18} {}", s.name(), s.description());
            }
        }
        Command::ValidateConfig(o) => {
            let config = o.resolve().map_err(config_failure)?;
            let text = serde_json::to_string_pretty(&config)
                .context("serializing the configuration")
                .map_err(Failure::Runtime)?;
            println!("{text}");
        }
        Command::Run(o) => {
            let config = o.resolve().map_err(config_failure)?;
            log::info!(
                "running {} with {} trials, seed {}",
                config.scenario,
                config.num_trials,
                config.seed
            );
            let output = run_experiment(&config)
                .with_context(|| format!("running {}", config.scenario))
                .map_err(Failure::Runtime)?;
            if output.failures > 0 {
                log::warn!("{} trial cells failed and were excluded", output.failures);
                if output.rows.is_empty() {
                    return Err(Failure::Runtime(anyhow::anyhow!("every trial failed")));
                }
            }
            let paths = emit_outputs(config.scenario, &output, &config.out)
                .context("writing outputs")
                .map_err(Failure::Runtime)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHANTRACK_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
