use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpsm::em::EmConfig;
use cpsm::synth::{generate_pair, SynthConfig};
use cpsm::FitConfig;
use cpsm_cli::adapt::{adapt, Method};
use cpsm_cli::bench::cmd_benchmark;
use cpsm_cli::io::{self, FitDocument};
use cpsm_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "cpsm", version, about = "Classification under conditional probability shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic source/target pair from a JSON SynthConfig.
    Generate {
        config: PathBuf,
        /// Directory for source.csv, target.csv and target_labels.csv.
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
    /// Fit the source models and adapt them to an unlabeled target.
    Adapt {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// naive, mlls or cpsm.
        #[arg(long, default_value = "cpsm")]
        method: Method,
        #[arg(long, default_value_t = FitConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = EmConfig::default().max_em_iters)]
        max_em_iters: usize,
        #[arg(long, default_value_t = EmConfig::default().em_tolerance)]
        em_tolerance: f64,
        /// Directory for fit.json and posterior.csv.
        #[arg(long, default_value = ".")]
        output: PathBuf,
    },
    /// Run a JSON ExperimentConfig sweep and write its metric CSV.
    Benchmark { config: PathBuf },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })
}

fn generate(config_path: &Path, output: &Path) -> Result<()> {
    let config: SynthConfig = io::read_json(config_path)?;
    let pair = generate_pair(&config)?;
    ensure_dir(output)?;
    io::write_labeled(&output.join("source.csv"), &pair.source)?;
    io::write_unlabeled(&output.join("target.csv"), &pair.target.unlabeled())?;
    io::write_labels(&output.join("target_labels.csv"), pair.target.labels())?;
    let share = |d: &cpsm::LabeledDataset| d.class_frequencies()[0];
    println!(
        "source: {} rows, p(y=1) = {:.4}; target: {} rows, q(y=1) = {:.4}; intercept = {:.6}",
        pair.source.len(),
        share(&pair.source),
        pair.target.len(),
        share(&pair.target),
        pair.intercept
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_adapt(
    source: &Path,
    target: &Path,
    method: Method,
    seed: u64,
    max_em_iters: usize,
    em_tolerance: f64,
    output: &Path,
) -> Result<()> {
    let source_data = io::read_labeled(source)?;
    let target_data = io::read_unlabeled(target)?;
    let fit_config = FitConfig {
        seed,
        ..FitConfig::default()
    };
    let mut em = EmConfig {
        max_em_iters,
        em_tolerance,
        ..EmConfig::default()
    };
    em.inner.seed = seed;
    let fit = adapt(&source_data, &target_data, method, &em, &fit_config)?;
    ensure_dir(output)?;
    io::write_json(&output.join("fit.json"), &FitDocument::from_fit(method.name(), seed, &fit))?;
    io::write_posterior(&output.join("posterior.csv"), &fit.target_posterior)?;
    let prior: Vec<String> = fit.estimated_prior.iter().map(|p| format!("{p:.4}")).collect();
    println!(
        "{method}: {} EM rounds, estimated prior [{}]",
        fit.iterations_run,
        prior.join(", ")
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, output } => generate(&config, &output),
        Command::Adapt {
            source,
            target,
            method,
            seed,
            max_em_iters,
            em_tolerance,
            output,
        } => run_adapt(&source, &target, method, seed, max_em_iters, em_tolerance, &output),
        Command::Benchmark { config } => {
            let rows = cmd_benchmark(&config)?;
            let failures = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} metric rows, {failures} failed", rows.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
