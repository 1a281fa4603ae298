//! File formats.
//!
//! Dataset CSV: header `y,z1..zdz,x1..xdx`, one row per sample, `y` empty in
//! target files. Posterior CSV: header `p1..pK`. Fit JSON: [`FitDocument`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cpsm::em::CpsmFit;
use cpsm::{LabeledDataset, PosteriorMatrix, SoftmaxParams, UnlabeledDataset};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FIT_FORMAT_VERSION: u32 = 1;

fn csv_error(path: &Path, err: csv::Error) -> CliError {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => CliError::io(path, e),
        other => CliError::Schema {
            path: path.to_owned(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn schema(path: &Path, line: u64, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn create_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

/// Column names `{prefix}1..{prefix}{n}`.
fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

/// Checks the header layout and returns `(d_z, d_x)`.
fn parse_header(path: &Path, header: &csv::StringRecord) -> Result<(usize, usize)> {
    let names: Vec<&str> = header.iter().collect();
    if names.first() != Some(&"y") {
        return Err(schema(path, 1, "first column must be named `y`"));
    }
    let d_z = names[1..].iter().take_while(|n| n.starts_with('z')).count();
    let d_x = names.len() - 1 - d_z;
    let expected: Vec<String> = std::iter::once("y".to_string())
        .chain(numbered("z", d_z))
        .chain(numbered("x", d_x))
        .collect();
    for (col, (got, want)) in names.iter().zip(&expected).enumerate() {
        if *got != want {
            return Err(schema(path, 1, format!("column {} is `{got}`, expected `{want}`", col + 1)));
        }
    }
    Ok((d_z, d_x))
}

fn parse_value(path: &Path, line: u64, field: &str, cell: &str) -> Result<f64> {
    let value: f64 = cell
        .trim()
        .parse()
        .map_err(|_| schema(path, line, format!("field `{field}`: `{cell}` is not a number")))?;
    if !value.is_finite() {
        return Err(schema(path, line, format!("field `{field}`: non-finite value `{cell}`")));
    }
    Ok(value)
}

fn parse_label(path: &Path, line: u64, cell: &str) -> Result<usize> {
    match cell.trim().parse::<usize>() {
        Ok(label) if label >= 1 => Ok(label),
        _ => Err(schema(path, line, format!("field `y`: `{cell}` is not a label in 1, 2, ...")))
    }
}

struct RawDataset {
    labels: Vec<Option<usize>>,
    z: Array2<f64>,
    x: Array2<f64>,
}

fn read_raw(path: &Path) -> Result<RawDataset> {
    let mut reader = open_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let (d_z, d_x) = parse_header(path, &header)?;
    let names: Vec<String> = header.iter().map(str::to_owned).collect();
    let (mut labels, mut zs, mut xs) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let y = record.get(0).unwrap_or("");
        labels.push(if y.trim().is_empty() { None } else { Some(parse_label(path, line, y)?) });
        for (col, cell) in record.iter().enumerate().skip(1) {
            let value = parse_value(path, line, &names[col], cell)?;
            if col <= d_z { zs.push(value) } else { xs.push(value) }
        }
    }
    let n = labels.len();
    Ok(RawDataset {
        labels,
        z: Array2::from_shape_vec((n, d_z), zs).expect("row width checked by the csv reader"),
        x: Array2::from_shape_vec((n, d_x), xs).expect("row width checked by the csv reader"),
    })
}

/// Reads a labeled dataset; every `y` cell must hold a label. The number of
/// classes is the largest label seen (at least 2).
pub fn read_labeled(path: &Path) -> Result<LabeledDataset> {
    let raw = read_raw(path)?;
    let mut labels = Vec::with_capacity(raw.labels.len());
    for (row, label) in raw.labels.iter().enumerate() {
        match label {
            Some(l) => labels.push(*l),
            None => return Err(schema(path, row as u64 + 2, "field `y`: missing label in a labeled dataset")),
        }
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0).max(2);
    Ok(LabeledDataset::new(raw.z, raw.x, labels, n_classes)?)
}

/// Reads features only; any `y` values are ignored.
pub fn read_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    let raw = read_raw(path)?;
    Ok(UnlabeledDataset::new(raw.z, raw.x)?)
}

fn write_rows(
    path: &Path,
    labels: Option<&[usize]>,
    z: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> Result<()> {
    let mut writer = create_writer(path)?;
    let header: Vec<String> = std::iter::once("y".to_string())
        .chain(numbered("z", z.ncols()))
        .chain(numbered("x", x.ncols()))
        .collect();
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..z.nrows() {
        record.clear();
        record.push(labels.map_or(String::new(), |l| l[i].to_string()));
        record.extend(z.row(i).iter().map(f64::to_string));
        record.extend(x.row(i).iter().map(f64::to_string));
        writer.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_labeled(path: &Path, data: &LabeledDataset) -> Result<()> {
    write_rows(path, Some(data.labels()), data.z(), data.x())
}

/// Writes the features of `data` with empty `y` cells.
pub fn write_unlabeled(path: &Path, data: &UnlabeledDataset) -> Result<()> {
    write_rows(path, None, data.z(), data.x())
}

/// One-column `y` file.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut writer = create_writer(path)?;
    writer.write_record(["y"]).map_err(|e| csv_error(path, e))?;
    for label in labels {
        writer.write_record([label.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut reader = open_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().collect::<Vec<_>>() != ["y"] {
        return Err(schema(path, 1, "label file must have the single column `y`"));
    }
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        labels.push(parse_label(path, line, &record[0])?);
    }
    Ok(labels)
}

pub fn write_posterior(path: &Path, posterior: &PosteriorMatrix) -> Result<()> {
    let mut writer = create_writer(path)?;
    let header: Vec<String> = numbered("p", posterior.n_classes()).collect();
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in posterior.probs().outer_iter() {
        writer
            .write_record(row.iter().map(f64::to_string))
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_posterior(path: &Path) -> Result<PosteriorMatrix> {
    let mut reader = open_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let k = header.len();
    let expected: Vec<String> = numbered("p", k).collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(schema(path, 1, "posterior header must be `p1..pK`"));
    }
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, cell) in record.iter().enumerate() {
            values.push(parse_value(path, line, &expected[col], cell)?);
        }
    }
    let probs = Array2::from_shape_vec((values.len() / k, k), values).expect("row width checked by the csv reader");
    Ok(PosteriorMatrix::new(probs)?)
}

/// Serialized result of `cpsm adapt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub format_version: u32,
    pub method: String,
    pub seed: u64,
    pub theta_hat: SoftmaxParams,
    pub loglik_trace: Vec<f64>,
    pub estimated_prior: Vec<f64>,
    pub iterations_run: usize,
}

impl FitDocument {
    pub fn from_fit(method: &str, seed: u64, fit: &CpsmFit) -> Self {
        Self {
            format_version: FIT_FORMAT_VERSION,
            method: method.to_owned(),
            seed,
            theta_hat: fit.theta_hat.clone(),
            loglik_trace: fit.loglik_trace.clone(),
            estimated_prior: fit.estimated_prior.to_vec(),
            iterations_run: fit.iterations_run,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value).map_err(|e| CliError::io(path, e.into()))?;
    writer.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_owned(),
        message: e.to_string(),
    })
}
