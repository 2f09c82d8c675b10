//! Thin command-line front end; all logic lives in the library.

use clap::{Parser, Subcommand};
use fedpeft::config::parse_config_file;
use fedpeft::harness::{compare_report, run_single, run_sweep, CompareMode};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedpeft", about = "Federated parameter-efficient fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (first configured seed unless --seed is given).
    Run {
        /// Path to a key = value config file.
        config: PathBuf,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured seed and write a sweep summary.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare completed run directories.
    Compare {
        /// Two or more run directories.
        dirs: Vec<PathBuf>,
        /// Alignment: `budget` (equal communication) or `rounds`.
        #[arg(long, default_value = "rounds")]
        mode: String,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> fedpeft::Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let mut spec = parse_config_file(&config)?;
            if let Some(seed) = seed {
                spec.seeds = vec![seed];
            }
            if let Some(out) = out {
                spec.out_dir = out;
            }
            spec.validate_for_launch()?;
            let seed = spec.seeds[0];
            let dir = spec.out_dir.join(format!("seed_{seed}"));
            let output = run_single(&spec, seed, &dir)?;
            println!(
                "{}: {} rounds, final accuracy {:.4}, {} trainable params, {} bits total",
                output.dir.display(),
                output.summary.total_rounds,
                output.summary.final_accuracy,
                output.summary.trainable_count,
                output.summary.cum_bits,
            );
            Ok(())
        }
        Command::Sweep { config, out } => {
            let mut spec = parse_config_file(&config)?;
            if let Some(out) = out {
                spec.out_dir = out;
            }
            let summary = run_sweep(&spec)?;
            println!(
                "{} seeds: mean final accuracy {:.4} (std {:.4}), best-3 mean {:.4}",
                summary.seeds.len(),
                summary.mean_final_accuracy,
                summary.std_final_accuracy,
                summary.best3_mean_accuracy,
            );
            println!(
                "sweep summary: {}",
                spec.out_dir.join("sweep_summary.json").display()
            );
            Ok(())
        }
        Command::Compare { dirs, mode } => {
            let mode: CompareMode = mode.parse()?;
            let comparison = compare_report(&dirs, mode)?;
            print!("{comparison}");
            Ok(())
        }
    }
}
