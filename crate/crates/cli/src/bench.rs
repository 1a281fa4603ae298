//! Grid sweeps over generated data.
//!
//! Runs are enumerated cell by cell in grid order (`a`, then `k`, then `n`)
//! and repetition by repetition; run `i` uses seed `base_seed + i` and all
//! methods of a run share its data. Rows are sorted by `(a, k, n, method, seed)`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cpsm::em::{EmConfig, SourceModels};
use cpsm::eval::{approximation_error, balanced_accuracy, classify_at_estimated_prior, fit_oracle, summarize, MetricRow};
use cpsm::synth::{generate_pair, induce_conditional_shift, ShiftProtocolConfig, SynthConfig};
use cpsm::{FitConfig, LabeledDataset, PosteriorMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_method, Method};
use crate::error::{CliError, Result};
use crate::io;

/// Where each run's source/target pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Fresh synthetic pair per run; `a` is the target prior `q(y=1)` and
    /// `k` the shift slope. Other fields come from the embedded config.
    Synthetic(SynthConfig),
    /// Stratified resampling of one fixed labeled dataset; `a` is the base
    /// rate and `k` the extra positive rate in the `z = 1` target stratum.
    Resample {
        /// Labeled CSV to resample. When absent, the source half of a
        /// synthetic pair drawn from `base` is used.
        #[serde(default)]
        base_data: Option<PathBuf>,
        #[serde(default)]
        base: SynthConfig,
        #[serde(default)]
        conditioning_column: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub a: Vec<f64>,
    pub k: Vec<f64>,
    pub n: Vec<usize>,
}

impl Grid {
    /// `(a, k, n)` in enumeration order.
    pub fn cells(&self) -> Vec<(f64, f64, usize)> {
        let mut cells = Vec::with_capacity(self.a.len() * self.k.len() * self.n.len());
        for &a in &self.a {
            for &k in &self.k {
                for &n in &self.n {
                    cells.push((a, k, n));
                }
            }
        }
        cells
    }
}

fn default_repetitions() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: Generator,
    pub methods: Vec<Method>,
    pub grid: Grid,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub output_path: PathBuf,
    /// Per-cell mean and standard deviation.
    #[serde(default)]
    pub aggregate_path: Option<PathBuf>,
    /// Off by default so that metric files are reproducible byte for byte;
    /// `wall_clock_seconds` is then 0.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.methods.is_empty() {
            return Err("methods must not be empty".into());
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return Err("methods must not repeat".into());
        }
        if self.grid.a.is_empty() || self.grid.k.is_empty() || self.grid.n.is_empty() {
            return Err("every grid axis (a, k, n) needs at least one value".into());
        }
        if self.repetitions == 0 {
            return Err("repetitions must be at least 1".into());
        }
        if self.grid.a.iter().chain(&self.grid.k).any(|v| !v.is_finite()) {
            return Err("grid values must be finite".into());
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.grid.cells().len() * self.repetitions
    }
}

#[derive(Debug, Clone, Copy)]
struct RunSpec {
    a: f64,
    k: f64,
    n: usize,
    seed: u64,
}

/// Fixed input of the resampling generator.
enum Base {
    None,
    Data(LabeledDataset),
}

fn load_base(config: &ExperimentConfig) -> Result<Base> {
    match &config.generator {
        Generator::Synthetic(_) => Ok(Base::None),
        Generator::Resample {
            base_data: Some(path), ..
        } => Ok(Base::Data(io::read_labeled(path)?)),
        Generator::Resample { base, .. } => Ok(Base::Data(generate_pair(base)?.source)),
    }
}

fn draw_run(config: &ExperimentConfig, base: &Base, run: RunSpec) -> cpsm::Result<(LabeledDataset, LabeledDataset)> {
    match (&config.generator, base) {
        (Generator::Synthetic(gen), _) => {
            let pair = generate_pair(&SynthConfig {
                target_prior: run.a,
                shift_slope: run.k,
                n_source: run.n,
                n_target: run.n,
                seed: run.seed,
                ..gen.clone()
            })?;
            Ok((pair.source, pair.target))
        }
        (
            Generator::Resample {
                conditioning_column, ..
            },
            Base::Data(data),
        ) => induce_conditional_shift(
            data,
            &ShiftProtocolConfig {
                base_rate: run.a,
                shift_delta: run.k,
                conditioning_column: *conditioning_column,
                n_source: run.n,
                n_target: run.n,
                seed: run.seed,
            },
        ),
        (Generator::Resample { .. }, Base::None) => unreachable!("base is loaded for resampling"),
    }
}

fn row(run: RunSpec, method: Method) -> MetricRow {
    MetricRow {
        method: method.name().to_owned(),
        a: run.a,
        k: run.k,
        n: run.n,
        seed: run.seed,
        balanced_accuracy: f64::NAN,
        approx_error: f64::NAN,
        wall_clock_seconds: 0.0,
        error: None,
    }
}

fn failed(run: RunSpec, method: Method, err: &dyn std::fmt::Display) -> MetricRow {
    MetricRow {
        error: Some(err.to_string()),
        ..row(run, method)
    }
}

fn score(target: &LabeledDataset, posterior: &PosteriorMatrix, oracle: &PosteriorMatrix) -> cpsm::Result<(f64, f64)> {
    let predicted = classify_at_estimated_prior(posterior)?;
    let ba = balanced_accuracy(target.labels(), &predicted, target.n_classes())?;
    Ok((ba, approximation_error(posterior, oracle)?))
}

fn execute_run(config: &ExperimentConfig, base: &Base, run: RunSpec) -> Vec<MetricRow> {
    let (source, target) = match draw_run(config, base, run) {
        Ok(pair) => pair,
        Err(e) => return config.methods.iter().map(|&m| failed(run, m, &e)).collect(),
    };
    let elapsed = |start: Instant| {
        if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let start = Instant::now();
    let oracle = fit_oracle(&target, &config.fit);
    let oracle_time = elapsed(start);
    let oracle = match oracle {
        Ok(o) => o,
        Err(e) => {
            let msg = format!("oracle fit failed: {e}");
            return config.methods.iter().map(|&m| failed(run, m, &msg)).collect();
        }
    };

    let needs_source = config.methods.iter().any(|&m| m != Method::Oracle);
    let start = Instant::now();
    let models = needs_source.then(|| SourceModels::fit(&source, &config.fit));
    let source_time = elapsed(start);
    let unlabeled = target.unlabeled();
    let source_prior = source.class_frequencies();

    config
        .methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let outcome: Result<(PosteriorMatrix, f64)> = match (method, &models) {
                (Method::Oracle, _) => Ok((oracle.clone(), oracle_time)),
                (_, Some(Ok(models))) => run_method(method, models, source_prior.view(), &unlabeled, &config.em)
                    .map(|fit| (fit.target_posterior, source_time + elapsed(start))),
                (_, Some(Err(e))) => Err(CliError::Usage(format!("source fit failed: {e}"))),
                (_, None) => unreachable!("source models are fitted whenever a non-oracle method runs"),
            };
            let scored = outcome.and_then(|(posterior, secs)| Ok((score(&target, &posterior, &oracle)?, secs)));
            match scored {
                Ok(((ba, err), secs)) => MetricRow {
                    balanced_accuracy: ba,
                    approx_error: err,
                    wall_clock_seconds: secs,
                    ..row(run, method)
                },
                Err(e) => failed(run, method, &e),
            }
        })
        .collect()
}

/// Runs the whole sweep. Failing runs yield rows with `error` set.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    config.validate().map_err(CliError::Usage)?;
    let base = load_base(config)?;
    let reps = config.repetitions;
    let runs: Vec<RunSpec> = config
        .grid
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(cell, (a, k, n))| {
            (0..reps).map(move |rep| RunSpec {
                a,
                k,
                n,
                seed: config.base_seed.wrapping_add((cell * reps + rep) as u64),
            })
        })
        .collect();
    let mut rows: Vec<MetricRow> = runs.par_iter().flat_map_iter(|&run| execute_run(config, &base, run)).collect();
    rows.sort_by(|x, y| {
        x.a.total_cmp(&y.a)
            .then(x.k.total_cmp(&y.k))
            .then(x.n.cmp(&y.n))
            .then(x.method.cmp(&y.method))
            .then(x.seed.cmp(&y.seed))
    });
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        writer.serialize(r).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// Writes the metric CSV with columns
/// `method,a,k,n,seed,balanced_accuracy,approx_error,wall_clock_seconds,error`.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_aggregate(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(path, &summarize(rows))
}

/// Reads, runs and writes one experiment; returns the rows.
pub fn cmd_benchmark(config_path: &Path) -> Result<Vec<MetricRow>> {
    let config: ExperimentConfig = io::read_json(config_path)?;
    config.validate().map_err(|message| CliError::Config {
        path: config_path.to_owned(),
        message,
    })?;
    let rows = run_benchmark(&config)?;
    write_metrics(&config.output_path, &rows)?;
    if let Some(path) = &config.aggregate_path {
        write_aggregate(path, &rows)?;
    }
    Ok(rows)
}
