//! Accuracy evaluation, cross-model ranking, aggregation, few-shot sweeps
//! and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, GenerationRequest, OracleBackend, ProxyBackend};
use crate::baselines::{column_means, fit_mlp, impute, predict_mlp};
use crate::ingest::{Dataset, SplitSpec};
use crate::metadata::ReformattedMetadata;
use crate::outparse::{parse_prediction, ParseStatus};
use crate::pipeline::{prepare_split, PipelineSettings, PreparedSplit};

pub const REPORT_SCHEMA: &str = "tabgen.eval-report/v1";

/// The train-ratio ladder of the few-shot protocol.
pub const FEWSHOT_RATIOS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("dataset `{0}` has no test rows")]
    NoTestRows(String),
    #[error("{dataset_id}/{model_id}: backend failed after {} of {} rows: {source}", .partial.counts.total, .planned)]
    Aborted {
        dataset_id: String,
        model_id: String,
        planned: usize,
        partial: Box<EvalResult>,
        #[source]
        source: BackendError,
    },
    #[error("dataset `{dataset}` has {rows} rows, above the few-shot limit of {limit}")]
    FewshotFilter {
        dataset: String,
        rows: usize,
        limit: usize,
    },
    #[error("invalid train ratio {0}")]
    InvalidRatio(f64),
    #[error("{model} needs a remote backend")]
    MissingBackend { model: ModelKind },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Models a sweep can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Oracle,
    Proxy,
    Remote,
    TreeEnsemble,
    Mlp,
}

impl ModelKind {
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Oracle => "oracle",
            ModelKind::Proxy => "proxy",
            ModelKind::Remote => "remote",
            ModelKind::TreeEnsemble => "tree-ensemble",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            ModelKind::Oracle,
            ModelKind::Proxy,
            ModelKind::Remote,
            ModelKind::TreeEnsemble,
            ModelKind::Mlp,
        ]
        .into_iter()
        .find(|m| m.id() == s)
        .ok_or_else(|| format!("unknown model `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub correct: usize,
    /// Rows whose output did not parse (counted as incorrect).
    pub failed_parse: usize,
    /// Rows with fewer probabilities than classes (counted as incorrect).
    pub truncated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_id: String,
    pub model_id: String,
    pub split: SplitSpec,
    pub accuracy: f64,
    pub counts: EvalCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendInfo>,
    /// False when evaluation stopped early.
    pub complete: bool,
}

/// How generated text is turned into a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseMode {
    /// `class 0: 0.1; class 1: 0.9.` style probability lists.
    #[default]
    Probabilities,
    /// A literal `class {t}` answer.
    ClassLiteral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub row_id: usize,
    pub prompt: String,
    pub true_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub max_new_tokens: usize,
    pub batch_size: usize,
    pub parse: ParseMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_new_tokens: crate::backends::DEFAULT_MAX_NEW_TOKENS,
            batch_size: 32,
            parse: ParseMode::Probabilities,
        }
    }
}

static CLASS_LITERAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bclass\s+([0-9]+)\b").expect("valid pattern"));

/// First `class {t}` mention with `t` in range.
pub fn scan_class_literal(text: &str, expected: usize) -> Option<usize> {
    CLASS_LITERAL
        .captures_iter(text)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .find(|&t| t < expected)
}

fn accuracy(counts: &EvalCounts) -> f64 {
    if counts.total == 0 {
        0.0
    } else {
        counts.correct as f64 / counts.total as f64
    }
}

/// Runs every test prompt through `backend` and scores the parsed classes.
/// A backend error stops the run and returns what was scored so far.
pub fn evaluate(
    dataset_id: &str,
    split: SplitSpec,
    items: &[TestItem],
    backend: &dyn Backend,
    expected_classes: usize,
    opts: EvalOptions,
) -> Result<EvalResult, HarnessError> {
    if items.is_empty() {
        return Err(HarnessError::NoTestRows(dataset_id.to_owned()));
    }
    let mut counts = EvalCounts::default();
    let result = |counts: EvalCounts, complete: bool| EvalResult {
        dataset_id: dataset_id.to_owned(),
        model_id: backend.id().to_owned(),
        split,
        accuracy: accuracy(&counts),
        counts,
        backend: Some(BackendInfo {
            id: backend.id().to_owned(),
            max_new_tokens: opts.max_new_tokens,
        }),
        complete,
    };
    for chunk in items.chunks(opts.batch_size.max(1)) {
        let reqs: Vec<GenerationRequest> = chunk
            .iter()
            .map(|it| GenerationRequest {
                prompt: it.prompt.clone(),
                max_new_tokens: opts.max_new_tokens,
                dataset_id: dataset_id.to_owned(),
                row_id: it.row_id,
            })
            .collect();
        for (item, resp) in chunk.iter().zip(backend.batch_generate(&reqs)) {
            let text = match resp {
                Ok(r) => r.text,
                Err(source) => {
                    return Err(HarnessError::Aborted {
                        dataset_id: dataset_id.to_owned(),
                        model_id: backend.id().to_owned(),
                        planned: items.len(),
                        partial: Box::new(result(counts, false)),
                        source,
                    });
                }
            };
            counts.total += 1;
            let predicted = match opts.parse {
                ParseMode::Probabilities => {
                    let p = parse_prediction(&text, expected_classes);
                    match p.status {
                        ParseStatus::Ok => p.predicted_class,
                        ParseStatus::Truncated => {
                            counts.truncated += 1;
                            None
                        }
                        ParseStatus::Failed => {
                            counts.failed_parse += 1;
                            None
                        }
                    }
                }
                ParseMode::ClassLiteral => {
                    let c = scan_class_literal(&text, expected_classes);
                    if c.is_none() {
                        counts.failed_parse += 1;
                    }
                    c
                }
            };
            if predicted == Some(item.true_class) {
                counts.correct += 1;
            }
        }
    }
    Ok(result(counts, true))
}

/// Scores direct class predictions (non-generative baselines).
pub fn score_predictions(
    dataset_id: &str,
    model_id: &str,
    split: SplitSpec,
    predicted: &[usize],
    truth: &[usize],
) -> EvalResult {
    let counts = EvalCounts {
        correct: predicted.iter().zip(truth).filter(|(p, t)| p == t).count(),
        failed_parse: 0,
        truncated: 0,
        total: truth.len(),
    };
    EvalResult {
        dataset_id: dataset_id.to_owned(),
        model_id: model_id.to_owned(),
        split,
        accuracy: accuracy(&counts),
        counts,
        backend: None,
        complete: true,
    }
}

/// 1-based ranks by descending value; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    crate::augmentor::space::percentile(sorted, q)
}

/// Mean, median and quartiles (linear interpolation between order
/// statistics).
pub fn aggregate(values: &[f64]) -> Result<Summary, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
    })
}

/// Accuracies and ranks per dataset, with per-model summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<String>,
    /// dataset → model → accuracy, with missing cells filled by 0.
    pub accuracy: BTreeMap<String, BTreeMap<String, f64>>,
    pub ranks: BTreeMap<String, BTreeMap<String, f64>>,
    pub accuracy_summary: BTreeMap<String, Summary>,
    pub rank_summary: BTreeMap<String, Summary>,
    pub warnings: Vec<String>,
}

/// Ranks `models` on every dataset of `grid` (dataset → model → accuracy).
/// Absent cells score 0.0 and are reported in `warnings`.
pub fn rank_models(grid: &BTreeMap<String, BTreeMap<String, f64>>, models: &[String]) -> RankTable {
    let mut accuracy = BTreeMap::new();
    let mut ranks = BTreeMap::new();
    let mut warnings = Vec::new();
    for (dataset, row) in grid {
        let values: Vec<f64> = models
            .iter()
            .map(|m| match row.get(m) {
                Some(&a) => a,
                None => {
                    warnings.push(format!("model `{m}` missing on dataset `{dataset}`; scored 0.0"));
                    0.0
                }
            })
            .collect();
        let r = average_ranks(&values);
        accuracy.insert(dataset.clone(), models.iter().cloned().zip(values).collect());
        ranks.insert(dataset.clone(), models.iter().cloned().zip(r).collect());
    }
    let summarize = |table: &BTreeMap<String, BTreeMap<String, f64>>| {
        models
            .iter()
            .filter_map(|m| {
                let v: Vec<f64> = table.values().map(|row| row[m]).collect();
                aggregate(&v).ok().map(|s| (m.clone(), s))
            })
            .collect()
    };
    RankTable {
        models: models.to_vec(),
        accuracy_summary: summarize(&accuracy),
        rank_summary: summarize(&ranks),
        accuracy,
        ranks,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub ratio: f64,
    pub table: RankTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub model_id: String,
    pub accuracy: Summary,
    pub rank: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub dataset_id: String,
    pub model_id: String,
    pub ratio: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub models: Vec<String>,
    pub results: Vec<EvalResult>,
    pub tables: Vec<RatioTable>,
    /// One row per (ratio, model).
    pub rows: Vec<SweepRow>,
    pub errors: Vec<CellError>,
    pub warnings: Vec<String>,
}

/// Groups results by train ratio, ranks each group and summarizes.
/// `datasets` lists every dataset that was attempted so that fully failed
/// datasets still show up as flagged zero cells.
pub fn build_report(
    results: Vec<EvalResult>,
    models: &[String],
    datasets: &[String],
    ratios: &[f64],
    errors: Vec<CellError>,
) -> Report {
    let mut tables = Vec::new();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &ratio in ratios {
        let mut grid: BTreeMap<String, BTreeMap<String, f64>> =
            datasets.iter().map(|d| (d.clone(), BTreeMap::new())).collect();
        for r in results.iter().filter(|r| r.split.train_ratio == ratio && r.complete) {
            grid.entry(r.dataset_id.clone())
                .or_default()
                .insert(r.model_id.clone(), r.accuracy);
        }
        let table = rank_models(&grid, models);
        for w in &table.warnings {
            warnings.push(format!("ratio {ratio}: {w}"));
        }
        for m in models {
            if let (Some(a), Some(k)) = (table.accuracy_summary.get(m), table.rank_summary.get(m)) {
                rows.push(SweepRow {
                    ratio,
                    model_id: m.clone(),
                    accuracy: *a,
                    rank: *k,
                });
            }
        }
        tables.push(RatioTable { ratio, table });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Report {
        schema: REPORT_SCHEMA.to_owned(),
        models: models.to_vec(),
        results,
        tables,
        rows,
        errors,
        warnings,
    }
}

/// Flat CSV: `dataset_id,model_id,ratio,accuracy,rank`.
pub fn report_csv(report: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset_id", "model_id", "ratio", "accuracy", "rank"])
        .expect("in-memory write");
    for t in &report.tables {
        for (dataset, row) in &t.table.accuracy {
            for m in &t.table.models {
                w.write_record([
                    dataset.as_str(),
                    m.as_str(),
                    &t.ratio.to_string(),
                    &row[m].to_string(),
                    &t.table.ranks[dataset][m].to_string(),
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let json_path = dir.join("report.json");
    let csv_path = dir.join("report.csv");
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    fs::write(&json_path, json).map_err(io(&json_path))?;
    fs::write(&csv_path, report_csv(report)).map_err(io(&csv_path))?;
    Ok((json_path, csv_path))
}

/// A dataset ready for evaluation: target set, metadata resolved.
#[derive(Debug, Clone)]
pub struct SweepDataset {
    pub dataset: Dataset,
    pub metadata: ReformattedMetadata,
}

/// Checks every dataset against the few-shot row limit.
pub fn check_fewshot_filter(datasets: &[SweepDataset], limit: Option<usize>) -> Result<(), HarnessError> {
    let Some(limit) = limit else {
        return Ok(());
    };
    match datasets.iter().find(|d| d.dataset.num_rows() > limit) {
        Some(d) => Err(HarnessError::FewshotFilter {
            dataset: d.dataset.id.clone(),
            rows: d.dataset.num_rows(),
            limit,
        }),
        None => Ok(()),
    }
}

fn eval_cell(
    prep: &PreparedSplit,
    model: ModelKind,
    remote: Option<&Arc<dyn Backend>>,
    settings: &PipelineSettings,
) -> Result<EvalResult, String> {
    let opts = EvalOptions {
        max_new_tokens: settings.max_new_tokens,
        ..EvalOptions::default()
    };
    let n_classes = prep.space.len();
    let generative = |backend: &dyn Backend| -> Result<EvalResult, String> {
        let items = prep
            .test_items(settings.variant, &settings.serialization)
            .map_err(|e| e.to_string())?;
        evaluate(&prep.dataset_id, prep.split, &items, backend, n_classes, opts)
            .map_err(|e| e.to_string())
    };
    let need_model = || {
        prep.model
            .clone()
            .ok_or_else(|| prep.model_error.clone().unwrap_or_else(|| "no model".into()))
    };
    match model {
        ModelKind::Oracle => {
            let mut oracle = OracleBackend::new();
            for (row_id, text) in prep.test_references().map_err(|e| e.to_string())? {
                oracle.insert(&prep.dataset_id, row_id, text);
            }
            generative(&oracle)
        }
        ModelKind::Proxy => {
            let mut proxy = ProxyBackend::new();
            proxy.add_dataset(&prep.test, need_model()?);
            generative(&proxy)
        }
        ModelKind::Remote => {
            let backend = remote.ok_or_else(|| {
                HarnessError::MissingBackend {
                    model: ModelKind::Remote,
                }
                .to_string()
            })?;
            generative(backend.as_ref())
        }
        ModelKind::TreeEnsemble => {
            let m = need_model()?;
            let predicted = m
                .encoder
                .transform(&prep.test.rows)
                .iter()
                .map(|x| m.ensemble.predict_class(x))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let mut r = score_predictions(&prep.dataset_id, model.id(), prep.split, &predicted, &prep.test_y);
            r.model_id = model.id().to_owned();
            Ok(r)
        }
        ModelKind::Mlp => {
            let (mut xtr, mut xte) = prep.encoded();
            let fill = column_means(&xtr);
            impute(&mut xtr, &fill);
            impute(&mut xte, &fill);
            let m = fit_mlp(&xtr, &prep.train_y, n_classes, &settings.mlp, settings.seeds.training)
                .map_err(|e| e.to_string())?;
            let predicted = predict_mlp(&m, &xte).map_err(|e| e.to_string())?;
            Ok(score_predictions(&prep.dataset_id, model.id(), prep.split, &predicted, &prep.test_y))
        }
    }
}

/// Evaluates every model on every dataset at every train ratio. Cells run
/// on a pool of `threads` workers (0 = one per logical core); failures are
/// recorded per cell and the sweep continues.
pub fn fewshot_sweep(
    registry: &[SweepDataset],
    ratios: &[f64],
    models: &[ModelKind],
    remote: Option<Arc<dyn Backend>>,
    settings: &PipelineSettings,
    threads: usize,
) -> Result<Report, HarnessError> {
    if let Some(&bad) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(HarnessError::InvalidRatio(bad));
    }
    if models.contains(&ModelKind::Remote) && remote.is_none() {
        return Err(HarnessError::MissingBackend {
            model: ModelKind::Remote,
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let tasks: Vec<(f64, &SweepDataset)> = ratios
        .iter()
        .flat_map(|&r| registry.iter().map(move |d| (r, d)))
        .collect();
    let cells: Vec<Vec<Result<EvalResult, CellError>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ratio, sd)| {
                let cell_err = |model: &str, message: String| CellError {
                    dataset_id: sd.dataset.id.clone(),
                    model_id: model.to_owned(),
                    ratio,
                    message,
                };
                let split = SplitSpec {
                    train_ratio: ratio,
                    seed: settings.seeds.split,
                };
                match prepare_split(&sd.dataset, &sd.metadata, split, settings) {
                    Err(e) => models
                        .iter()
                        .map(|m| Err(cell_err(m.id(), e.to_string())))
                        .collect(),
                    Ok(prep) => models
                        .iter()
                        .map(|&m| eval_cell(&prep, m, remote.as_ref(), settings).map_err(|e| cell_err(m.id(), e)))
                        .collect(),
                }
            })
            .collect()
    });
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for cell in cells.into_iter().flatten() {
        match cell {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!(
                    "{} / {} at ratio {}: {}",
                    e.dataset_id,
                    e.model_id,
                    e.ratio,
                    e.message
                );
                errors.push(e);
            }
        }
    }
    let model_ids: Vec<String> = models.iter().map(|m| m.id().to_owned()).collect();
    let dataset_ids: Vec<String> = registry.iter().map(|d| d.dataset.id.clone()).collect();
    Ok(build_report(results, &model_ids, &dataset_ids, ratios, errors))
}
