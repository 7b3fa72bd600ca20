use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lipvae::experiment::{Command, Experiment, ExperimentConfig, Runner};

/// Train Lipschitz-constrained VAEs and evaluate latent-hole outlier scores.
///
/// Every subcommand reads one JSON experiment config; flags only pick the
/// file and override the seeds or the output directory.
#[derive(Parser, Debug)]
#[command(name = "lipvae", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train (or fetch from the cache) every model variant for every seed
    Train(RunArgs),
    /// Write per-input score CSVs for the inlier and outlier test sets
    Score(RunArgs),
    /// Score and summarize AUROC/AUPRC/FPR80 with confidence intervals
    Eval(RunArgs),
    /// Sweep the decoder Lipschitz constant and report AUROC per setting
    AblateDecoder(RunArgs),
    /// Scale outlier intensities and compare vanilla and Lipschitz models
    AblateCompactness(RunArgs),
    /// Export L-infinity norms of posterior means and their density curves
    LatentNorms(RunArgs),
    /// Write the unit-sphere surface area for dimensions 1..=max_dim
    SphereArea(RunArgs),
    /// Held-out-class experiment with an S2 latent VAE
    SphereToy(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON)
    #[arg(short, long, value_name = "FILE")]
    config: PathBuf,

    /// Replace the config's seed list
    #[arg(long, value_delimiter = ',', value_name = "SEEDS")]
    seeds: Option<Vec<u64>>,

    /// Replace the config's output directory
    #[arg(short, long, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Suppress progress messages on stderr
    #[arg(short, long)]
    quiet: bool,
}

impl Cmd {
    fn parts(&self) -> (Command, &RunArgs) {
        match self {
            Cmd::Train(a) => (Command::Train, a),
            Cmd::Score(a) => (Command::Score, a),
            Cmd::Eval(a) => (Command::Eval, a),
            Cmd::AblateDecoder(a) => (Command::AblateDecoder, a),
            Cmd::AblateCompactness(a) => (Command::AblateCompactness, a),
            Cmd::LatentNorms(a) => (Command::LatentNorms, a),
            Cmd::SphereArea(a) => (Command::SphereArea, a),
            Cmd::SphereToy(a) => (Command::SphereToy, a),
        }
    }
}

fn load(command: Command, args: &RunArgs) -> Result<Experiment> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let mut config = ExperimentConfig::from_json(&text)
        .with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(dir) = &args.output_dir {
        // Flag paths are relative to the working directory, not the config.
        config.output_dir = std::path::absolute(dir)
            .with_context(|| format!("cannot resolve {}", dir.display()))?;
    }
    let base_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok(Experiment::new(config, base_dir, command)?)
}

fn run(cli: Cli) -> Result<()> {
    let (command, args) = cli.command.parts();
    let exp = load(command, args)?;
    let quiet = args.quiet;
    let files = Runner::new(&exp)
        .with_progress(|msg| {
            if !quiet {
                eprintln!("{msg}");
            }
        })
        .run()
        .with_context(|| format!("{} failed", command.name()))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
