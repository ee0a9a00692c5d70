use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Which CSV columns hold controls, observations and the sequence id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub u: Vec<String>,
    pub y: Vec<String>,
    /// Rows sharing a value of this column form one trajectory.
    #[serde(default)]
    pub seq: Option<String>,
}

/// Dataset manifest: where the CSV lives and how to split it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    /// CSV file, relative to the manifest.
    pub file: PathBuf,
    /// Optional separate test file; when absent the data is split by
    /// `train_fraction`.
    #[serde(default)]
    pub test_file: Option<PathBuf>,
    pub columns: ColumnSpec,
    #[serde(default = "default_lag")]
    pub lag: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// Where the public data can be obtained.
    #[serde(default)]
    pub source: Option<String>,
}

fn default_lag() -> usize {
    5
}

fn default_fraction() -> f64 {
    0.5
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
}

/// Reads the trajectories of one CSV file (comma separated, header row).
pub fn read_trajectories(path: &Path, spec: &ColumnSpec) -> Result<Vec<Trajectory>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let u_idx = spec
        .u
        .iter()
        .map(|c| column_index(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let y_idx = spec
        .y
        .iter()
        .map(|c| column_index(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let seq_idx = spec
        .seq
        .as_ref()
        .map(|c| column_index(&headers, c, path))
        .transpose()?;

    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    let mut current: Option<String> = None;
    let (mut us, mut ys) = (Vec::new(), Vec::new());
    let flush = |us: &mut Vec<f64>, ys: &mut Vec<f64>, out: &mut Vec<Trajectory>| -> Result<()> {
        if ys.is_empty() {
            return Ok(());
        }
        let n = ys.len() / spec.y.len().max(1);
        let t = Trajectory::new(
            Array::matrix(n, spec.u.len(), std::mem::take(us)),
            Array::matrix(n, spec.y.len(), std::mem::take(ys)),
            None,
            source.clone(),
        )
        .map_err(|e| Error::Data(format!("{}: sequence {}: {e}", path.display(), out.len() + 1)))?;
        out.push(t);
        Ok(())
    };
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{}: row {line}, column '{name}': non-numeric value '{raw}'",
                        path.display()
                    ))
                })
        };
        if let Some(s) = seq_idx {
            let id = record.get(s).unwrap_or("").trim().to_string();
            if current.as_ref() != Some(&id) {
                flush(&mut us, &mut ys, &mut out)?;
                current = Some(id);
            }
        }
        for (&idx, name) in u_idx.iter().zip(&spec.u) {
            us.push(cell(idx, name)?);
        }
        for (&idx, name) in y_idx.iter().zip(&spec.y) {
            ys.push(cell(idx, name)?);
        }
    }
    flush(&mut us, &mut ys, &mut out)?;
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

/// Writes trajectories with a header row; a sequence column is added when
/// `spec.seq` is set.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory], spec: &ColumnSpec) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = Vec::new();
    if let Some(s) = &spec.seq {
        header.push(s);
    }
    header.extend(spec.u.iter().map(String::as_str));
    header.extend(spec.y.iter().map(String::as_str));
    w.write_record(&header)?;
    for (k, t) in trajs.iter().enumerate() {
        if t.u.cols() != spec.u.len() || t.y.cols() != spec.y.len() {
            return Err(Error::Shape("trajectory does not match the column spec".into()));
        }
        for i in 0..t.len() {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            if spec.seq.is_some() {
                row.push((k + 1).to_string());
            }
            row.extend(t.u.row(i).iter().map(f64::to_string));
            row.extend(t.y.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn split(trajs: Vec<Trajectory>, fraction: f64) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok((trajs, Vec::new()));
    }
    if trajs.len() == 1 {
        let t = &trajs[0];
        let cut = (t.len() as f64 * fraction).floor() as usize;
        if cut < 2 || t.len() - cut < 2 {
            return Err(Error::Data(format!(
                "trajectory of length {} too short to split at {fraction}",
                t.len()
            )));
        }
        return Ok((vec![t.slice(0..cut)?], vec![t.slice(cut..t.len())?]));
    }
    let n = trajs.len();
    let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut train = trajs;
    let test = train.split_off(n_train);
    Ok((train, test))
}

/// Loads one CSV and splits it: a single trajectory is cut in time, several
/// trajectories are split by count.
pub fn load_csv(path: &Path, spec: &ColumnSpec, train_fraction: f64, lag: usize) -> Result<Dataset> {
    let trajs = read_trajectories(path, spec)?;
    let (train, test) = split(trajs, train_fraction)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, train, test, lag)
}

/// Loads a dataset described by a TOML manifest.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let file = base.join(&manifest.file);
    let mut ds = match &manifest.test_file {
        Some(test) => {
            let train = read_trajectories(&file, &manifest.columns)?;
            let test = read_trajectories(&base.join(test), &manifest.columns)?;
            Dataset::new(manifest.name.clone(), train, test, manifest.lag)?
        }
        None => load_csv(&file, &manifest.columns, manifest.train_fraction, manifest.lag)?,
    };
    ds.name = manifest.name;
    Ok(ds)
}
