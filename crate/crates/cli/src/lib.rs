//! Runner for training and evaluating point-process policies from config
//! files.
//!
//! A run reads a TOML config (or a previous run's `run-manifest.json`),
//! executes one command and writes its artifacts into the configured output
//! directory. Failed runs leave nothing behind.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};

use serde_json::Value;

pub use config::{Command, RunConfig, RunManifest};
pub use error::{CliError, CliResult};
use output::Outputs;

/// What a successful run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    /// The command's summary, as written to disk.
    pub summary: Value,
}

fn to_value<T: serde::Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(|e| CliError::Data(e.to_string()))
}

fn execute(config: &RunConfig, out: &mut Outputs) -> CliResult<Value> {
    out.write_json("run-manifest.json", &RunManifest::new(config.clone()))?;
    match config.command {
        Command::Train => to_value(&commands::train(config, out)?),
        Command::Eval => to_value(&commands::eval(config, out)?),
        Command::SampleCheck => to_value(&commands::sample_check(config, out)?),
        Command::GradCheck => to_value(&commands::grad_check(config, out)?),
        Command::Calibrate => to_value(&commands::calibrate(config, out)?),
        Command::ReplayConvert => to_value(&commands::replay_convert(config, out)?),
    }
}

/// Runs a resolved config. On failure every output of the run is removed.
pub fn run(config: &RunConfig) -> CliResult<RunOutcome> {
    let mut out = Outputs::create(&config.output_dir)?;
    let result = if config.threads > 0 {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
        {
            Ok(pool) => pool.install(|| execute(config, &mut out)),
            Err(e) => Err(CliError::Config(format!(
                "cannot start {} worker threads: {e}",
                config.threads
            ))),
        }
    } else {
        execute(config, &mut out)
    };
    match result {
        Ok(summary) => Ok(RunOutcome {
            output_dir: config.output_dir.clone(),
            summary,
        }),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

/// Loads `path` (TOML config or run manifest), applies `key=value`
/// overrides and runs it.
pub fn run_path(path: &Path, overrides: &[String]) -> CliResult<RunOutcome> {
    run(&config::load(path, overrides)?)
}
