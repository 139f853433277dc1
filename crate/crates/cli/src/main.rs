use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use levyfp::error::Error;
use levyfp::experiment::{run_experiment, ExperimentConfig, Stage};

/// Fokker-Planck operators for Levy-driven SDEs.
#[derive(Parser)]
#[command(name = "levyfp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stages of an experiment config and write CSV reports.
    Run {
        config: PathBuf,
        /// Output directory (default: `output.dir` from the config, else `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only these stages (repeatable); default is the config's run list.
        #[arg(long = "stage", value_name = "NAME")]
        stages: Vec<Stage>,
    },
}

const THREADS_VAR: &str = "LEVYFP_THREADS";

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_VAR} must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let Command::Run { config, out, stages } = cli.command;
    let cfg = match ExperimentConfig::from_file(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let out = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match run_experiment(&cfg, &out, &stages) {
        Ok(outcome) => {
            for c in &outcome.checks {
                let status = match c.threshold {
                    None => "info",
                    Some(_) if c.pass => "pass",
                    Some(_) => "FAIL",
                };
                println!("{:<10} {:<32} {:>14.6e}  {status}", c.stage, c.check, c.value);
            }
            if let Some((stage, msg)) = &outcome.failure {
                eprintln!("stage {stage} failed: {msg}");
            }
            println!("reports written to {}", out.display());
            if outcome.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("{}: {e}", config.display());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
