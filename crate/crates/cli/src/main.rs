use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rss_atlas::experiment::{self, ExperimentConfig};
use rss_atlas::Error;

/// Compress signal-strength maps and score them as localization likelihoods.
#[derive(Parser)]
#[command(name = "rss-atlas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic survey as CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the configured compressors and their GP maps.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score trained pipelines on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the five standard pipelines and rank them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

const THREADS_ENV: &str = "RSS_ATLAS_THREADS";

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Parse { .. }
        | Error::Data(_)
        | Error::Dimension { .. }
        | Error::FormatVersion { .. }
        | Error::MissingFile(_)
        | Error::Io { .. }
        | Error::Json(_) => 2,
        Error::NotPositiveDefinite { .. } | Error::Diverged { .. } | Error::Numerical(_) => 3,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => {
            let (env, file_seed) = experiment::load_synth_config(&config)?;
            let ds = experiment::run_synth(&env, seed.unwrap_or(file_seed), &out)?;
            println!(
                "wrote {} samples x {} access points to {}",
                ds.len(),
                ds.n_aps(),
                out.display()
            );
        }
        Command::Train { config, seed } => {
            let cfg = load(&config, seed)?;
            let (trained, _) = experiment::run_train(&cfg)?;
            for t in &trained {
                println!(
                    "{:<12} latent {:>3}  reconstruction RMSE {:.3} dBm",
                    t.spec.label(),
                    t.pipeline.latent_dim(),
                    t.reconstruction_rmse_dbm
                );
            }
            println!("models written to {}", cfg.output_dir.display());
        }
        Command::Evaluate { config, seed } => {
            let cfg = load(&config, seed)?;
            let (eval, _) = experiment::run_evaluate(&cfg)?;
            for r in &eval.results {
                println!(
                    "{:<12} mean KL {:.4}  mean argmax error {:.2} m",
                    r.label, r.mean_kl, r.mean_argmax_error
                );
            }
        }
        Command::Compare { config, seed } => {
            let cfg = load(&config, seed)?;
            let (cmp, _) = experiment::run_compare(&cfg)?;
            for r in &cmp.ranking {
                println!(
                    "{}. {:<12} mean KL {:.4}  mean argmax error {:.2} m",
                    r.rank, r.label, r.mean_kl, r.mean_argmax_error
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
