//! Metadata reformatting: ask a chat-completion service to name the target
//! column and describe the features, with a per-dataset cache and an
//! offline fallback.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{column_key, Dataset};
use crate::serializer::normalize_column_name;

/// Environment variable holding the chat-service bearer token.
pub const API_KEY_ENV: &str = "TABGEN_CHAT_API_KEY";

const REFORMAT_TEMPLATE: &str = r#"The following is the metadata of a tabular dataset. Return the information for:
1. the target of the dataset. If no target exists, choose one from the column as target for the dataset to classify.
2. the features and their explanations, or N/A if there are no explanations. Replace all hyphens and/or underscores with spaces.

Give your output in json. The following is an example output:
{
    "target": "Age",
    "metadata": "The target of the dataset is Age. \n Features and their explanations:\n    gender: an animal's gender.\n    weight: an animal's actual weight, in kg."
}

Do NOT respond anything else than the needed information. Make it brief but informative.
Your responses should only be code, without explanation or formatting.

columns:{col}

metadata:{metadata}
Provide your response in stringfied JSON format."#;

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("malformed service response: {0}")]
    Malformed(String),
    #[error("service response lacks field `{0}`")]
    MissingField(&'static str),
    #[error("service picked target `{target}`, which matches no column")]
    UnknownTarget { target: String },
    #[error("chat service: {0}")]
    Service(String),
    #[error("dataset `{0}` needs at least two columns")]
    TooFewColumns(String),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReformattedMetadata {
    pub target: String,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataSource {
    Service,
    Fallback,
}

/// Any chat-completion service: one user message in, one reply out.
pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, MetadataError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatClientConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_retries: u32,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        ChatClientConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".to_owned(),
            model: "gpt-3.5-turbo".to_owned(),
            timeout: Duration::from_secs(60),
            max_retries: 1,
        }
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v > 0.0) {
            return Err(serde::de::Error::custom("timeout must be positive"));
        }
        Ok(Duration::from_secs_f64(v))
    }
}

/// OpenAI-style `chat/completions` client.
pub struct HttpChatClient {
    config: ChatClientConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

impl HttpChatClient {
    /// Reads the credential from [`API_KEY_ENV`] when present.
    pub fn new(config: ChatClientConfig) -> Result<Self, MetadataError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| MetadataError::Service(e.to_string()))?;
        Ok(HttpChatClient {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            config,
            http,
        })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, MetadataError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| MetadataError::Service(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(MetadataError::Service(format!("HTTP {status}")));
        }
        let v: serde_json::Value = resp
            .json()
            .map_err(|e| MetadataError::Service(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| MetadataError::Service("response has no message content".into()))
    }
}

/// Fills the reformatting template with the column list and raw metadata.
pub fn build_reformat_prompt(raw_metadata: &str, columns: &[&str]) -> String {
    REFORMAT_TEMPLATE
        .replace("{col}", &columns.join(","))
        .replace("{metadata}", raw_metadata)
}

fn strip_fence(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Decodes the service reply and resolves its target against `columns`.
pub fn parse_reformat_response(
    response: &str,
    columns: &[&str],
) -> Result<ReformattedMetadata, MetadataError> {
    let v: serde_json::Value = serde_json::from_str(strip_fence(response))
        .map_err(|e| MetadataError::Malformed(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| MetadataError::Malformed("expected a JSON object".into()))?;
    let target = obj
        .get("target")
        .and_then(|t| t.as_str())
        .ok_or(MetadataError::MissingField("target"))?;
    let description = obj
        .get("metadata")
        .and_then(|t| t.as_str())
        .filter(|d| !d.trim().is_empty())
        .ok_or(MetadataError::MissingField("metadata"))?;
    let column = resolve_target(target, columns).ok_or_else(|| MetadataError::UnknownTarget {
        target: target.to_owned(),
    })?;
    Ok(ReformattedMetadata {
        target: column.to_owned(),
        description: description.to_owned(),
    })
}

/// The unique column whose [`column_key`] equals the target's.
pub fn resolve_target<'a>(target: &str, columns: &[&'a str]) -> Option<&'a str> {
    if let Some(c) = columns.iter().find(|c| **c == target) {
        return Some(c);
    }
    let key = column_key(target);
    let mut hits = columns.iter().filter(|c| column_key(c) == key);
    match (hits.next(), hits.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

/// Offline metadata: the manifest hint or the last column as target, and
/// `N/A` explanations for every other column.
pub fn fallback_reformat(d: &Dataset) -> Result<ReformattedMetadata, MetadataError> {
    if d.columns.len() < 2 {
        return Err(MetadataError::TooFewColumns(d.id.clone()));
    }
    let target = d
        .target_column
        .clone()
        .unwrap_or_else(|| d.columns.last().expect("non-empty").name.clone());
    let mut description = format!(
        "The target of the dataset is {}.",
        normalize_column_name(&target)
    );
    for col in d.columns.iter().filter(|c| c.name != target) {
        description.push('\n');
        description.push_str(&normalize_column_name(&col.name));
        description.push_str(": N/A");
    }
    Ok(ReformattedMetadata {
        target,
        description,
    })
}

/// Content hash of the reformatting inputs.
pub fn cache_key(raw_metadata: &str, columns: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(raw_metadata.as_bytes());
    for c in columns {
        h.update([0u8]);
        h.update(c.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub target: String,
    pub description: String,
    pub source: MetadataSource,
}

/// One `{dataset_id}.json` file per dataset. Writes to the same key are
/// serialized; different keys proceed in parallel.
#[derive(Debug)]
pub struct MetadataCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl MetadataCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MetadataCache {
            dir: dir.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, dataset_id: &str) -> PathBuf {
        self.dir.join(format!("{dataset_id}.json"))
    }

    fn lock_for(&self, dataset_id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().expect("cache lock map");
        map.entry(dataset_id.to_owned()).or_default().clone()
    }

    /// The cached entry for `dataset_id` if its key matches.
    pub fn get(&self, dataset_id: &str, key: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.path(dataset_id)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.key == key).then_some(entry)
    }

    pub fn put(&self, dataset_id: &str, entry: &CacheEntry) -> Result<(), MetadataError> {
        let lock = self.lock_for(dataset_id);
        let _guard = lock.lock().expect("cache key lock");
        let path = self.path(dataset_id);
        let err = |message: String| MetadataError::Cache {
            path: path.clone(),
            message,
        };
        fs::create_dir_all(&self.dir).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        fs::write(&tmp, body).map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, &path).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReformatPolicy {
    pub max_retries: u32,
    pub allow_fallback: bool,
}

impl Default for ReformatPolicy {
    fn default() -> Self {
        ReformatPolicy {
            max_retries: 1,
            allow_fallback: true,
        }
    }
}

/// Cached reformatting. On a miss the service is asked up to
/// `1 + max_retries` times; invalid replies count as failed attempts.
/// `client = None` means offline: only the fallback is available.
pub fn reformat(
    d: &Dataset,
    client: Option<&dyn ChatClient>,
    cache: &MetadataCache,
    policy: ReformatPolicy,
) -> Result<(ReformattedMetadata, MetadataSource), MetadataError> {
    let columns: Vec<&str> = d.columns.iter().map(|c| c.name.as_str()).collect();
    let key = cache_key(&d.raw_metadata, &columns);
    if let Some(hit) = cache.get(&d.id, &key) {
        return Ok((
            ReformattedMetadata {
                target: hit.target,
                description: hit.description,
            },
            hit.source,
        ));
    }

    let mut last_err = MetadataError::Service("no chat client configured".into());
    if let Some(client) = client {
        let prompt = build_reformat_prompt(&d.raw_metadata, &columns);
        for attempt in 0..=policy.max_retries {
            match client
                .complete(&prompt)
                .and_then(|r| parse_reformat_response(&r, &columns))
            {
                Ok(meta) => {
                    cache.put(&d.id, &entry(&key, &meta, MetadataSource::Service))?;
                    return Ok((meta, MetadataSource::Service));
                }
                Err(e) => {
                    log::warn!("dataset `{}`: reformat attempt {} failed: {e}", d.id, attempt + 1);
                    last_err = e;
                }
            }
        }
    }
    if !policy.allow_fallback {
        return Err(last_err);
    }
    let meta = fallback_reformat(d)?;
    cache.put(&d.id, &entry(&key, &meta, MetadataSource::Fallback))?;
    Ok((meta, MetadataSource::Fallback))
}

fn entry(key: &str, meta: &ReformattedMetadata, source: MetadataSource) -> CacheEntry {
    CacheEntry {
        key: key.to_owned(),
        target: meta.target.clone(),
        description: meta.description.clone(),
        source,
    }
}
