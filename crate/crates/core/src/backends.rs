//! Generative predictors: an echo oracle, a tree-ensemble proxy, and a
//! remote model served over HTTP.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentor::{augment_probs, first_argmax, serialize_target, AugmentError, TreeEnsembleModel};
use crate::ingest::Dataset;
use crate::promptgen::CorpusRecord;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{url} unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("{url} answered HTTP {status}")]
    Status { url: String, status: u16 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no record for dataset `{dataset_id}` row {row_id}")]
    UnknownRecord { dataset_id: String, row_id: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("remote generation failed: {0}")]
    Remote(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub dataset_id: String,
    pub row_id: usize,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, dataset_id: impl Into<String>, row_id: usize) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            dataset_id: dataset_id.into(),
            row_id,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
}

/// A text generator that plays the role of the universal predictor.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError>;

    /// Responses are aligned with `reqs`; failures are reported per item.
    fn batch_generate(
        &self,
        reqs: &[GenerationRequest],
    ) -> Vec<Result<GenerationResponse, BackendError>> {
        reqs.iter().map(|r| self.generate(r)).collect()
    }
}

fn timed<F: FnOnce() -> Result<String, BackendError>>(
    id: &str,
    f: F,
) -> Result<GenerationResponse, BackendError> {
    let start = Instant::now();
    let text = f()?;
    Ok(GenerationResponse {
        text,
        latency: start.elapsed(),
        backend_id: id.to_owned(),
    })
}

/// Returns the stored reference text of each record.
#[derive(Debug, Default, Clone)]
pub struct OracleBackend {
    references: HashMap<(String, usize), String>,
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: &[CorpusRecord]) -> Self {
        let mut o = Self::new();
        for r in records {
            o.insert(&r.dataset_id, r.row_id, r.reference.clone());
        }
        o
    }

    pub fn insert(&mut self, dataset_id: &str, row_id: usize, reference: String) {
        self.references.insert((dataset_id.to_owned(), row_id), reference);
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

impl Backend for OracleBackend {
    fn id(&self) -> &str {
        "oracle"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        req.validate()?;
        timed(self.id(), || {
            self.references
                .get(&(req.dataset_id.clone(), req.row_id))
                .cloned()
                .ok_or_else(|| BackendError::UnknownRecord {
                    dataset_id: req.dataset_id.clone(),
                    row_id: req.row_id,
                })
        })
    }
}

struct ProxyDataset {
    model: Arc<TreeEnsembleModel>,
    rows: HashMap<usize, Vec<f64>>,
}

/// Answers with the fitted ensemble's own calibrated probabilities. The
/// two-decimal rendering keeps the ensemble's first-max class on top, so
/// parsing the text recovers exactly the ensemble's prediction.
#[derive(Default)]
pub struct ProxyBackend {
    datasets: HashMap<String, ProxyDataset>,
}

impl ProxyBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the rows the proxy may be asked about, encoded with the
    /// model's encoder.
    pub fn add_dataset(&mut self, rows: &Dataset, model: Arc<TreeEnsembleModel>) {
        let encoded = rows
            .rows
            .iter()
            .map(|r| (r.id, model.encoder.transform_row(r)))
            .collect();
        self.datasets.insert(
            rows.id.clone(),
            ProxyDataset {
                model,
                rows: encoded,
            },
        );
    }

    /// Calibrated probabilities for a registered row.
    pub fn probabilities(&self, dataset_id: &str, row_id: usize) -> Result<Vec<f64>, BackendError> {
        let unknown = || BackendError::UnknownRecord {
            dataset_id: dataset_id.to_owned(),
            row_id,
        };
        let ds = self.datasets.get(dataset_id).ok_or_else(unknown)?;
        let x = ds.rows.get(&row_id).ok_or_else(unknown)?;
        Ok(ds.model.ensemble.predict_proba(x)?)
    }
}

impl Backend for ProxyBackend {
    fn id(&self) -> &str {
        "proxy"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        req.validate()?;
        timed(self.id(), || {
            let p = self.probabilities(&req.dataset_id, req.row_id)?;
            let shown = augment_probs(&p, first_argmax(&p))?;
            Ok(serialize_target(&shown))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Upper bound on in-flight requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

fn default_concurrency() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        RemoteConfig {
            url: url.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_retries(),
            concurrency: default_concurrency(),
        }
    }
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    max_new_tokens: usize,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
}

#[derive(Serialize)]
struct BatchBody<'a> {
    prompts: Vec<&'a str>,
    max_new_tokens: usize,
}

#[derive(Deserialize)]
struct BatchReply {
    results: Vec<BatchItem>,
}

#[derive(Deserialize)]
struct BatchItem {
    text: Option<String>,
    error: Option<String>,
}

/// Counting semaphore bounding concurrent HTTP requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for a model server speaking the `/generate`, `/batch_generate`
/// and `/health` protocol.
pub struct RemoteBackend {
    config: RemoteConfig,
    base: String,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteBackend {
    /// Connects and checks `/health`; a failing health check is an error.
    pub fn connect(config: RemoteConfig) -> Result<Self, BackendError> {
        if !(config.timeout_secs > 0.0) {
            return Err(BackendError::InvalidRequest("timeout must be positive".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let backend = RemoteBackend {
            base: config.url.trim_end_matches('/').to_owned(),
            gate: Gate::new(config.concurrency),
            config,
            http,
        };
        backend.health()?;
        Ok(backend)
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn health(&self) -> Result<(), BackendError> {
        let url = format!("{}/health", self.base);
        let resp = self.http.get(&url).send().map_err(|e| transport(&url, e))?;
        if !resp.status().is_success() {
            return Err(BackendError::Status {
                url,
                status: resp.status().as_u16(),
            });
        }
        Ok(())
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = format!("{}{path}", self.base);
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.gate.acquire();
                self.http.post(&url).json(body).send()
            };
            let err = match result {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json()
                        .map_err(|e| BackendError::Protocol(format!("{url}: {e}")));
                }
                Ok(resp) => {
                    let status = resp.status();
                    let err = BackendError::Status {
                        url: url.clone(),
                        status: status.as_u16(),
                    };
                    if status.is_client_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) => transport(&url, e),
            };
            if attempt >= self.config.max_retries {
                return Err(err);
            }
            attempt += 1;
            log::warn!("{err}; retry {attempt}/{}", self.config.max_retries);
        }
    }
}

fn transport(url: &str, e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout {
            url: url.to_owned(),
        }
    } else {
        BackendError::Unreachable {
            url: url.to_owned(),
            message: e.to_string(),
        }
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        req.validate()?;
        timed(self.id(), || {
            let reply: GenerateReply = self.post(
                "/generate",
                &GenerateBody {
                    prompt: &req.prompt,
                    max_new_tokens: req.max_new_tokens,
                },
            )?;
            Ok(reply.text)
        })
    }

    /// One `/batch_generate` call per distinct `max_new_tokens`; falls back
    /// to per-item `/generate` when the server has no batch endpoint.
    fn batch_generate(
        &self,
        reqs: &[GenerationRequest],
    ) -> Vec<Result<GenerationResponse, BackendError>> {
        if reqs.is_empty() {
            return Vec::new();
        }
        let mut out: Vec<Option<Result<GenerationResponse, BackendError>>> =
            reqs.iter().map(|r| r.validate().err().map(Err)).collect();
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, r) in reqs.iter().enumerate() {
            if out[i].is_some() {
                continue;
            }
            match groups.iter_mut().find(|g| g.0 == r.max_new_tokens) {
                Some(g) => g.1.push(i),
                None => groups.push((r.max_new_tokens, vec![i])),
            }
        }
        for (max_new_tokens, idx) in groups {
            let start = Instant::now();
            let body = BatchBody {
                prompts: idx.iter().map(|&i| reqs[i].prompt.as_str()).collect(),
                max_new_tokens,
            };
            match self.post::<_, BatchReply>("/batch_generate", &body) {
                Ok(reply) if reply.results.len() == idx.len() => {
                    let latency = start.elapsed();
                    for (&i, item) in idx.iter().zip(reply.results) {
                        out[i] = Some(match (item.text, item.error) {
                            (Some(text), None) => Ok(GenerationResponse {
                                text,
                                latency,
                                backend_id: self.id().to_owned(),
                            }),
                            (_, Some(e)) => Err(BackendError::Remote(e)),
                            (None, None) => Err(BackendError::Protocol(
                                "batch item has neither text nor error".into(),
                            )),
                        });
                    }
                }
                Ok(reply) => {
                    let msg = format!(
                        "batch returned {} results for {} prompts",
                        reply.results.len(),
                        idx.len()
                    );
                    for &i in &idx {
                        out[i] = Some(Err(BackendError::Protocol(msg.clone())));
                    }
                }
                Err(BackendError::Status { status: 404 | 405, .. }) => {
                    for &i in &idx {
                        out[i] = Some(self.generate(&reqs[i]));
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for &i in &idx {
                        out[i] = Some(Err(BackendError::Remote(msg.clone())));
                    }
                }
            }
        }
        out.into_iter()
            .map(|o| o.expect("every request answered"))
            .collect()
    }
}
