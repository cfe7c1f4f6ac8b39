//! CSV loading, schema inference, cutoff subsampling and train/test splits.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serializer::format_float;

/// Integer target columns with at most this many distinct values are treated
/// as class labels; anything wider is binned as a continuous target.
pub const MAX_DISCRETE_DISTINCT: usize = 20;

/// Row cutoff applied to every dataset before corpus generation.
pub const DEFAULT_MAX_ROWS: usize = 7500;

/// Cell spellings read as missing values.
const MISSING_MARKERS: &[&str] = &[
    "", "NA", "N/A", "n/a", "NaN", "nan", "NULL", "null", "None", "#N/A", "<NA>",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: record {record} has {found} fields, header has {expected}")]
    Arity {
        path: PathBuf,
        record: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: empty dataset (no data rows)")]
    Empty { path: PathBuf },
    #[error("dataset `{dataset}`: no column named `{column}`")]
    UnknownColumn { dataset: String, column: String },
    #[error("dataset `{dataset}`: target column is not set")]
    TargetUnset { dataset: String },
    #[error("dataset `{dataset}`: target column `{column}` has no values")]
    TargetMissing { dataset: String, column: String },
    #[error("dataset `{dataset}`: target column `{column}` has a single distinct value")]
    DegenerateTarget { dataset: String, column: String },
    #[error("dataset `{dataset}`: need at least 2 rows to split, found {rows}")]
    TooFewRows { dataset: String, rows: usize },
    #[error("train ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Integer,
    Float,
    Text,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub missing_count: usize,
}

/// A typed cell. The variant always agrees with the owning column's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Missing,
    Integer(i64),
    Float(f64),
    Boolean(bool),
    Text(String),
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(v) => Some(*v as f64),
            Value::Float(v) => Some(*v),
            _ => None,
        }
    }

    /// Plain-text form used for class labels and categorical codes.
    pub fn label(&self) -> Option<String> {
        match self {
            Value::Missing => None,
            Value::Integer(v) => Some(v.to_string()),
            Value::Float(v) => Some(format_float(*v, 6, 1)),
            Value::Boolean(true) => Some("True".to_owned()),
            Value::Boolean(false) => Some("False".to_owned()),
            Value::Text(s) => Some(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Position of the row in the source file (0-based, header excluded).
    pub id: usize,
    pub cells: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub raw_metadata: String,
    pub columns: Vec<ColumnSchema>,
    pub rows: Vec<Row>,
    pub target_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetKind {
    Discrete { labels: Vec<String> },
    Continuous { min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_ratio: f64, seed: u64) -> Result<Self, IngestError> {
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(IngestError::InvalidRatio(train_ratio));
        }
        Ok(SplitSpec { train_ratio, seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_path: Option<PathBuf>,
}

/// Dataset manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Few-shot registries keep only datasets with at most this many rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_max_rows: Option<usize>,
    pub datasets: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| IngestError::Manifest {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
        manifest.base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        let mut seen = HashSet::new();
        for entry in &manifest.datasets {
            if !seen.insert(entry.id.as_str()) {
                return Err(IngestError::Manifest {
                    path: path.to_owned(),
                    message: format!("duplicate dataset id `{}`", entry.id),
                });
            }
        }
        Ok(manifest)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads every dataset, in manifest order.
    pub fn load_all(&self) -> Vec<Result<Dataset, IngestError>> {
        self.datasets
            .par_iter()
            .map(|entry| load_dataset(&self.resolve(&entry.path), entry, self))
            .collect()
    }
}

/// Loads one CSV file. `manifest` is used to resolve the metadata path.
pub fn load_dataset(
    path: &Path,
    entry: &ManifestEntry,
    manifest: &Manifest,
) -> Result<Dataset, IngestError> {
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut dataset = read_csv(&entry.id, path, file)?;
    if let Some(meta) = &entry.metadata_path {
        let meta_path = manifest.resolve(meta);
        dataset.raw_metadata =
            fs::read_to_string(&meta_path).map_err(|source| IngestError::Io {
                path: meta_path,
                source,
            })?;
    }
    if let Some(hint) = &entry.target_column {
        let name = dataset
            .resolve_column(hint)
            .ok_or_else(|| IngestError::UnknownColumn {
                dataset: dataset.id.clone(),
                column: hint.clone(),
            })?
            .to_owned();
        dataset.target_column = Some(name);
    }
    Ok(dataset)
}

/// Parses comma-separated text with a header row into a dataset.
///
/// `origin` only labels error messages.
pub fn read_csv<R: Read>(id: &str, origin: &Path, reader: R) -> Result<Dataset, IngestError> {
    let csv_err = |source| IngestError::Csv {
        path: origin.to_owned(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let names = header_names(headers.iter());
    let width = names.len();

    let mut raw: Vec<Vec<String>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != width {
            return Err(IngestError::Arity {
                path: origin.to_owned(),
                record: i as u64 + 1,
                expected: width,
                found: record.len(),
            });
        }
        raw.push(record.iter().map(str::to_owned).collect());
    }
    if raw.is_empty() {
        return Err(IngestError::Empty {
            path: origin.to_owned(),
        });
    }

    let mut columns = Vec::with_capacity(width);
    for (c, name) in names.into_iter().enumerate() {
        let (kind, missing_count) = infer_kind(raw.iter().map(|r| r[c].as_str()));
        columns.push(ColumnSchema {
            name,
            kind,
            missing_count,
        });
    }
    let rows = raw
        .into_iter()
        .enumerate()
        .map(|(id, cells)| Row {
            id,
            cells: cells
                .into_iter()
                .zip(&columns)
                .map(|(cell, col)| parse_cell(cell, col.kind))
                .collect(),
        })
        .collect();

    Ok(Dataset {
        id: id.to_owned(),
        raw_metadata: String::new(),
        columns,
        rows,
        target_column: None,
    })
}

/// Empty header names become `Unnamed: {index}`; repeated names get a
/// `.{n}` suffix so every column name is unique.
fn header_names<'a>(raw: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, h) in raw.enumerate() {
        let base = if h.trim().is_empty() {
            format!("Unnamed: {i}")
        } else {
            h.to_owned()
        };
        let count = seen.entry(base.clone()).or_insert(0);
        let name = if *count == 0 {
            base.clone()
        } else {
            format!("{base}.{count}")
        };
        *count += 1;
        out.push(name);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellClass {
    Missing,
    Boolean,
    Integer,
    Float,
    Text,
}

fn is_missing(cell: &str) -> bool {
    MISSING_MARKERS.contains(&cell.trim())
}

fn classify(cell: &str) -> CellClass {
    if is_missing(cell) {
        return CellClass::Missing;
    }
    let t = cell.trim();
    if t.eq_ignore_ascii_case("true") || t.eq_ignore_ascii_case("false") {
        CellClass::Boolean
    } else if t.parse::<i64>().is_ok() {
        CellClass::Integer
    } else if parse_finite(t).is_some() {
        CellClass::Float
    } else {
        CellClass::Text
    }
}

fn parse_finite(t: &str) -> Option<f64> {
    // f64::from_str accepts "inf"/"nan" spellings; only plain decimals count.
    if !t.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn join(kinds: impl Iterator<Item = CellClass>) -> (ColumnKind, usize) {
    let mut missing = 0;
    let (mut b, mut i, mut f, mut t) = (false, false, false, false);
    for k in kinds {
        match k {
            CellClass::Missing => missing += 1,
            CellClass::Boolean => b = true,
            CellClass::Integer => i = true,
            CellClass::Float => f = true,
            CellClass::Text => t = true,
        }
    }
    let kind = if t || (b && (i || f)) {
        ColumnKind::Text
    } else if b {
        ColumnKind::Boolean
    } else if f {
        ColumnKind::Float
    } else if i {
        // Missing cells force a float column, as a dataframe reader would.
        if missing > 0 {
            ColumnKind::Float
        } else {
            ColumnKind::Integer
        }
    } else {
        ColumnKind::Float
    };
    (kind, missing)
}

fn infer_kind<'a>(cells: impl Iterator<Item = &'a str>) -> (ColumnKind, usize) {
    join(cells.map(classify))
}

fn parse_cell(cell: String, kind: ColumnKind) -> Value {
    if is_missing(&cell) {
        return Value::Missing;
    }
    let t = cell.trim();
    match kind {
        ColumnKind::Integer => t.parse().map(Value::Integer).unwrap_or(Value::Missing),
        ColumnKind::Float => parse_finite(t).map(Value::Float).unwrap_or(Value::Missing),
        ColumnKind::Boolean => Value::Boolean(t.eq_ignore_ascii_case("true")),
        ColumnKind::Text => Value::Text(cell),
    }
}

/// Re-derives column schemas from the typed cells of a loaded dataset.
pub fn infer_schema(d: &Dataset) -> Vec<ColumnSchema> {
    d.columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            let classes = d.rows.iter().map(|r| match &r.cells[c] {
                Value::Missing => CellClass::Missing,
                Value::Integer(_) => CellClass::Integer,
                Value::Float(_) => CellClass::Float,
                Value::Boolean(_) => CellClass::Boolean,
                Value::Text(_) => CellClass::Text,
            });
            let (mut kind, missing_count) = join(classes);
            // A float column keeps its kind even if every surviving cell is missing.
            if missing_count == d.rows.len() {
                kind = col.kind;
            }
            ColumnSchema {
                name: col.name.clone(),
                kind,
                missing_count,
            }
        })
        .collect()
}

/// Lowercased name with runs of spaces, underscores and hyphens collapsed to
/// one space. Two names with the same key refer to the same column.
pub fn column_key(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_sep = false;
    for ch in name.trim().chars() {
        if ch == ' ' || ch == '_' || ch == '-' {
            pending_sep = true;
            continue;
        }
        if pending_sep && !out.is_empty() {
            out.push(' ');
        }
        pending_sep = false;
        out.extend(ch.to_lowercase());
    }
    out
}

impl Dataset {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Exact match first, then a unique match under [`column_key`].
    pub fn resolve_column(&self, name: &str) -> Option<&str> {
        if let Some(i) = self.column_index(name) {
            return Some(&self.columns[i].name);
        }
        let key = column_key(name);
        let mut hits = self.columns.iter().filter(|c| column_key(&c.name) == key);
        match (hits.next(), hits.next()) {
            (Some(c), None) => Some(&c.name),
            _ => None,
        }
    }

    pub fn target_index(&self) -> Option<usize> {
        self.target_column
            .as_deref()
            .and_then(|t| self.column_index(t))
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Same schema and metadata with a different row set; missing counts
    /// are recomputed.
    pub fn with_rows(&self, rows: Vec<Row>) -> Dataset {
        let mut d = Dataset {
            id: self.id.clone(),
            raw_metadata: self.raw_metadata.clone(),
            columns: self.columns.clone(),
            rows,
            target_column: self.target_column.clone(),
        };
        for (c, m) in missing_counts(&d).into_iter().enumerate() {
            d.columns[c].missing_count = m;
        }
        d
    }
}

fn missing_counts(d: &Dataset) -> Vec<usize> {
    (0..d.columns.len())
        .map(|c| d.rows.iter().filter(|r| r.cells[c].is_missing()).count())
        .collect()
}

/// Uniform subsample without replacement down to `max_rows`, keeping the
/// original row order. Datasets at or below the cutoff come back unchanged.
pub fn apply_cutoff(d: Dataset, max_rows: usize, seed: u64) -> Dataset {
    let max_rows = max_rows.max(1);
    if d.rows.len() <= max_rows {
        return d;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, d.rows.len(), max_rows).into_vec();
    keep.sort_unstable();
    let rows = keep.into_iter().map(|i| d.rows[i].clone()).collect();
    d.with_rows(rows)
}

/// Number of training rows for `n` rows at `ratio`.
pub fn train_size(n: usize, ratio: f64) -> usize {
    let raw = (ratio * n as f64).round() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded disjoint train/test partition. Both halves keep source order.
pub fn split(d: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset), IngestError> {
    let n = d.rows.len();
    if n < 2 {
        return Err(IngestError::TooFewRows {
            dataset: d.id.clone(),
            rows: n,
        });
    }
    if !(spec.train_ratio > 0.0 && spec.train_ratio < 1.0) {
        return Err(IngestError::InvalidRatio(spec.train_ratio));
    }
    let n_train = train_size(n, spec.train_ratio);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = d
        .rows
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    Ok((
        d.with_rows(train.into_iter().map(|(r, _)| r).collect()),
        d.with_rows(test.into_iter().map(|(r, _)| r).collect()),
    ))
}

/// Decides whether the target holds class labels or a continuous quantity.
pub fn detect_target_kind(d: &Dataset) -> Result<TargetKind, IngestError> {
    let column = d
        .target_column
        .clone()
        .ok_or_else(|| IngestError::TargetUnset {
            dataset: d.id.clone(),
        })?;
    let idx = d
        .column_index(&column)
        .ok_or_else(|| IngestError::UnknownColumn {
            dataset: d.id.clone(),
            column: column.clone(),
        })?;
    let kind = d.columns[idx].kind;
    let values: Vec<&Value> = d
        .rows
        .iter()
        .map(|r| &r.cells[idx])
        .filter(|v| !v.is_missing())
        .collect();
    if values.is_empty() {
        return Err(IngestError::TargetMissing {
            dataset: d.id.clone(),
            column,
        });
    }
    let mut labels: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for v in &values {
        if let Some(l) = v.label() {
            if seen.insert(l.clone()) {
                labels.push(l);
            }
        }
    }
    let discrete = match kind {
        ColumnKind::Text | ColumnKind::Boolean => true,
        ColumnKind::Integer | ColumnKind::Float => labels.len() <= MAX_DISCRETE_DISTINCT,
    };
    if discrete {
        if labels.len() < 2 {
            return Err(IngestError::DegenerateTarget {
                dataset: d.id.clone(),
                column,
            });
        }
        return Ok(TargetKind::Discrete { labels });
    }
    let nums = values.iter().filter_map(|v| v.as_f64());
    let (min, max) = nums.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    Ok(TargetKind::Continuous { min, max })
}
