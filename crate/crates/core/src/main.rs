//! Command-line front end: generate stream manifests, run experiments,
//! and build comparison reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use streameval::config::ExperimentConfig;
use streameval::runner;
use streameval::Error;

/// Prints one line, tolerating a closed pipe (e.g. `streameval run | head`).
fn emit(line: std::fmt::Arguments<'_>) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{line}");
}

macro_rules! outln {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

#[derive(Parser)]
#[command(
    name = "streameval",
    about = "Streaming open-world classification benchmark with MAC-metered learners",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one stream-task manifest per configured seed.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain and stream per seed; write logs, summaries, plot CSVs, and
    /// checkpoints.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Aggregate completed run directories into comparison CSVs.
    Report {
        /// Directories previously populated by `run`.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf), Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let config = ExperimentConfig::from_json(&text)?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (set output_dir or --out)".into()))?;
    Ok((config, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { config } => {
            let (config, out) = load_config(&config)?;
            let paths = runner::cmd_gen(&config, &out)?;
            for p in paths {
                outln!("{}", p.display());
            }
        }
        Command::Run {
            config,
            jobs,
            seed_override,
        } => {
            let (config, out) = load_config(&config)?;
            let summaries = runner::cmd_run(&config, &out, jobs, seed_override)?;
            for s in &summaries {
                let auroc = s
                    .metrics
                    .unseen_auroc
                    .map_or("n/a".to_string(), |v| format!("{v:.4}"));
                outln!(
                    "{} seed {}: overall {:.4}, mean-per-class {:.4}, auroc {}, gmacs {:.6}",
                    s.learner,
                    s.seed,
                    s.metrics.overall_accuracy,
                    s.metrics.mean_per_class,
                    auroc,
                    s.metrics.total_gmacs
                );
                for w in &s.warnings {
                    eprintln!("warning ({} seed {}): {w}", s.learner, s.seed);
                }
            }
        }
        Command::Report { run_dirs, out } => {
            let paths = runner::cmd_report(&run_dirs, &out)?;
            outln!("{}", paths.comparison.display());
            outln!("{}", paths.accuracy_vs_macs.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
