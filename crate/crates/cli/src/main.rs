use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stein_core::harness::{exit_code, run_config, run_path, sample_checkpoint, ExperimentConfig, RunOptions, RunReport};
use stein_core::Result;

#[derive(Parser)]
#[command(name = "stein", version, about = "SVGD, amortized samplers and adversarial energy-model training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory, overriding `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root seed, overriding `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Run the built-in self-tests and print a pass/fail table.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table to `checks.txt` in this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Draw samples from a trained generator checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Class to condition on; conditional generators otherwise cycle through all classes.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn report(r: &RunReport) {
    if !r.summary.is_empty() {
        print!("{}", r.summary);
        if !r.summary.ends_with('\n') {
            println!();
        }
    }
    for f in &r.files {
        println!("wrote {}", f.display());
    }
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run { config, out, seed, overwrite } => {
            let r = run_path(&config, &RunOptions { out, seed, overwrite })?;
            report(&r);
            Ok(r.passed())
        }
        Command::Check { seed, out, overwrite } => {
            let r = run_config(ExperimentConfig::check(seed), std::path::Path::new("."), &RunOptions { out, seed: None, overwrite })?;
            report(&r);
            Ok(r.passed())
        }
        Command::Sample { checkpoint, n, seed, label, out, overwrite } => {
            let path = sample_checkpoint(&checkpoint, n, seed, label, &out, overwrite)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
