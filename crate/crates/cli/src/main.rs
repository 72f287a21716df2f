use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Train and evaluate point-process policies.
#[derive(Debug, Parser)]
#[command(name = "pointrl", version)]
struct Args {
    /// TOML config, or the run-manifest.json of an earlier run.
    config: PathBuf,

    /// Override a config key, e.g. `--set train.iterations=200`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--set command=<COMMAND>`.
    #[arg(long)]
    command: Option<String>,

    /// Shorthand for `--set output_dir=<DIR>`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut overrides = args.overrides;
    if let Some(c) = args.command {
        overrides.push(format!("command=\"{c}\""));
    }
    if let Some(o) = args.output {
        overrides.push(format!("output_dir=\"{}\"", o.display()));
    }
    match pointrl::run_path(&args.config, &overrides) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.summary).unwrap_or_default()
            );
            log::info!("artifacts in {}", outcome.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
