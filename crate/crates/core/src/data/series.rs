use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfad_tensor::Tensor;

use crate::error::{Error, Result};

/// A multivariate flow series, `values` shaped `[T, N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    pub name: String,
    pub values: Tensor<f64>,
    pub steps_per_day: usize,
    pub first_step_day_of_week: usize,
}

/// JSON sidecar describing a series CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesMeta {
    #[serde(default)]
    pub name: Option<String>,
    pub nodes: usize,
    pub steps: usize,
    pub steps_per_day: usize,
    pub first_step_day_of_week: usize,
}

impl TrafficSeries {
    pub fn new(
        name: impl Into<String>,
        values: Tensor<f64>,
        steps_per_day: usize,
        first_step_day_of_week: usize,
    ) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::config(format!(
                "series values must be [T, N, C], got {:?}",
                values.shape()
            )));
        }
        if steps_per_day == 0 || first_step_day_of_week > 6 {
            return Err(Error::config("steps_per_day must be positive and day of week in 0..=6"));
        }
        Ok(Self { name: name.into(), values, steps_per_day, first_step_day_of_week })
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, t: usize, node: usize, c: usize) -> f64 {
        let s = self.values.shape();
        self.values.data()[(t * s[1] + node) * s[2] + c]
    }

    /// Rows `[start, start + len)` as one contiguous `[len, N, C]` slice.
    pub fn slice(&self, start: usize, len: usize) -> &[f64] {
        let row = self.nodes() * self.channels();
        &self.values.data()[start * row..(start + len) * row]
    }

    pub fn time_of_day(&self, t: usize) -> usize {
        t % self.steps_per_day
    }

    pub fn day_of_week(&self, t: usize) -> usize {
        (self.first_step_day_of_week + t / self.steps_per_day) % 7
    }

    pub fn meta(&self) -> SeriesMeta {
        SeriesMeta {
            name: Some(self.name.clone()),
            nodes: self.nodes(),
            steps: self.steps(),
            steps_per_day: self.steps_per_day,
            first_step_day_of_week: self.first_step_day_of_week,
        }
    }
}

fn ingestion(file: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ingestion { file: file.to_path_buf(), location: location.into(), message: message.into() }
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

pub fn load_meta(meta_path: &Path) -> Result<SeriesMeta> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: SeriesMeta = serde_json::from_str(&text).map_err(|e| {
        ingestion(meta_path, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    if meta.steps_per_day == 0 {
        return Err(ingestion(meta_path, "steps_per_day", "must be positive"));
    }
    if meta.first_step_day_of_week > 6 {
        return Err(ingestion(meta_path, "first_step_day_of_week", "must lie in 0..=6"));
    }
    Ok(meta)
}

/// Reads a `T × N` flow CSV (one column per node, no index column) checked
/// against its sidecar. A first row whose cells are all non-numeric is taken
/// as a header. Row numbers in errors are 1-based file lines.
pub fn load_series(data_path: &Path, meta_path: &Path) -> Result<TrafficSeries> {
    let meta = load_meta(meta_path)?;
    let file = fs::File::open(data_path).map_err(|e| Error::io(data_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut values = Vec::with_capacity(meta.steps * meta.nodes);
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| ingestion(data_path, format!("row {line}"), e.to_string()))?;
        if i == 0 && record.iter().all(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != meta.nodes {
            return Err(ingestion(
                data_path,
                format!("row {line}"),
                format!("expected {} columns, found {}", meta.nodes, record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                ingestion(
                    data_path,
                    format!("row {line}, column {}", col + 1),
                    format!("non-numeric cell `{cell}`"),
                )
            })?;
            if !v.is_finite() {
                return Err(ingestion(
                    data_path,
                    format!("row {line}, column {}", col + 1),
                    format!("non-finite value `{cell}`"),
                ));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows != meta.steps {
        return Err(ingestion(
            data_path,
            format!("row {}", rows + 1),
            format!("metadata declares {} rows, file has {rows}", meta.steps),
        ));
    }
    let name = meta.name.clone().unwrap_or_else(|| {
        data_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let values = Tensor::new(vec![rows, meta.nodes, 1], values)?;
    TrafficSeries::new(name, values, meta.steps_per_day, meta.first_step_day_of_week)
}

/// Writes a single-channel series as CSV plus its JSON sidecar. Values are
/// printed in shortest round-trip form, so reloading is bit-exact.
pub fn write_series(series: &TrafficSeries, data_path: &Path) -> Result<PathBuf> {
    if series.channels() != 1 {
        return Err(Error::config("only single-channel series can be written"));
    }
    if let Some(dir) = data_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::with_capacity(series.values.numel() * 12);
    let n = series.nodes();
    for row in series.values.data().chunks(n) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(data_path).map_err(|e| Error::io(data_path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(data_path, e))?;

    let meta_path = sidecar_path(data_path);
    let json = serde_json::to_string_pretty(&series.meta()).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta_path)
}
