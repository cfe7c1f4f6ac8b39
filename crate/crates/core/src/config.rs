//! Run configuration: a TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::RemoteConfig;
use crate::evalharness::{ModelKind, FEWSHOT_RATIOS};
use crate::ingest::DEFAULT_MAX_ROWS;
use crate::metadata::ChatClientConfig;
use crate::promptgen::{AugmentationMode, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("`{field}` points to {path}, which does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub cutoff: u64,
    pub split: u64,
    /// Tree ensemble calibration folds and MLP initialization.
    pub training: u64,
}

/// Which generative backend `evaluate` and `fewshot` use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    #[default]
    Proxy,
    Remote,
}

impl BackendKind {
    pub fn model(self) -> ModelKind {
        match self {
            BackendKind::Oracle => ModelKind::Oracle,
            BackendKind::Proxy => ModelKind::Proxy,
            BackendKind::Remote => ModelKind::Remote,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub concurrency: usize,
    pub max_new_tokens: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        let r = RemoteConfig::new("");
        BackendSection {
            kind: BackendKind::default(),
            url: None,
            timeout_secs: r.timeout_secs,
            max_retries: r.max_retries,
            concurrency: r.concurrency,
            max_new_tokens: crate::backends::DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatSection {
    /// When false, metadata comes from the cache or the offline fallback.
    pub enabled: bool,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Use the offline fallback when the service keeps failing.
    pub fallback: bool,
}

impl Default for ChatSection {
    fn default() -> Self {
        let c = ChatClientConfig::default();
        ChatSection {
            enabled: false,
            endpoint: c.endpoint,
            model: c.model,
            timeout_secs: c.timeout.as_secs_f64(),
            max_retries: c.max_retries,
            fallback: true,
        }
    }
}

impl ChatSection {
    pub fn client_config(&self) -> ChatClientConfig {
        ChatClientConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            timeout: std::time::Duration::from_secs_f64(self.timeout_secs),
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub variant: Variant,
    pub mode: AugmentationMode,
    /// Train ratio for corpus building and single-split evaluation.
    pub train_ratio: f64,
    /// Train ratios for the few-shot sweep.
    pub ratios: Vec<f64>,
    pub max_rows: usize,
    /// Worker threads; 0 means one per logical core.
    pub parallelism: usize,
    /// Non-generative models evaluated next to the backend.
    pub baselines: Vec<ModelKind>,
    pub seeds: Seeds,
    pub backend: BackendSection,
    pub chat: ChatSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("manifest.json"),
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("out"),
            variant: Variant::Heavy,
            mode: AugmentationMode::Augmented,
            train_ratio: 0.8,
            ratios: FEWSHOT_RATIOS.to_vec(),
            max_rows: DEFAULT_MAX_ROWS,
            parallelism: 0,
            baselines: vec![ModelKind::TreeEnsemble, ModelKind::Mlp],
            seeds: Seeds::default(),
            backend: BackendSection::default(),
            chat: ChatSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.cache_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn remote_config(&self) -> Option<RemoteConfig> {
        self.backend.url.as_ref().map(|url| RemoteConfig {
            url: url.clone(),
            timeout_secs: self.backend.timeout_secs,
            max_retries: self.backend.max_retries,
            concurrency: self.backend.concurrency,
        })
    }

    /// Backend first, then baselines, without duplicates.
    pub fn models(&self) -> Vec<ModelKind> {
        let mut out = vec![self.backend.kind.model()];
        for &b in &self.baselines {
            if !out.contains(&b) {
                out.push(b);
            }
        }
        out
    }

    /// Checks values and that the manifest exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ratio_ok = |r: f64| r > 0.0 && r < 1.0;
        if !ratio_ok(self.train_ratio) {
            return Err(ConfigError::Invalid(format!(
                "train_ratio must lie in (0, 1), got {}",
                self.train_ratio
            )));
        }
        if self.ratios.is_empty() {
            return Err(ConfigError::Invalid("ratios must not be empty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !ratio_ok(**r)) {
            return Err(ConfigError::Invalid(format!("ratio {r} must lie in (0, 1)")));
        }
        if self.max_rows == 0 {
            return Err(ConfigError::Invalid("max_rows must be at least 1".into()));
        }
        if self.backend.max_new_tokens == 0 {
            return Err(ConfigError::Invalid("backend.max_new_tokens must be at least 1".into()));
        }
        if !(self.backend.timeout_secs > 0.0) || !(self.chat.timeout_secs > 0.0) {
            return Err(ConfigError::Invalid("timeouts must be positive".into()));
        }
        if self.backend.kind == BackendKind::Remote && self.backend.url.is_none() {
            return Err(ConfigError::Invalid("the remote backend needs backend.url".into()));
        }
        if let Some(b) = self
            .baselines
            .iter()
            .find(|b| !matches!(b, ModelKind::TreeEnsemble | ModelKind::Mlp))
        {
            return Err(ConfigError::Invalid(format!("`{b}` is not a baseline model")));
        }
        if !self.manifest.is_file() {
            return Err(ConfigError::MissingPath {
                field: "manifest",
                path: self.manifest.clone(),
            });
        }
        Ok(())
    }
}

/// Parses a comma-separated ratio list such as `0.1,0.5,0.9`.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| ConfigError::Invalid(format!("`{t}` is not a ratio")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.json"), r#"{"datasets":[]}"#).unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
manifest = "m.json"
variant = "light"
mode = "onehot"
ratios = [0.1, 0.5]
baselines = ["mlp"]

[seeds]
split = 7

[backend]
kind = "remote"
url = "http://localhost:8000"
"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.variant, Variant::Light);
        assert_eq!(cfg.mode, AugmentationMode::Onehot);
        assert_eq!(cfg.seeds, Seeds { cutoff: 0, split: 7, training: 0 });
        assert_eq!(cfg.manifest, dir.path().join("m.json"));
        assert_eq!(cfg.models(), [ModelKind::Remote, ModelKind::Mlp]);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));

        let cfg = RunConfig {
            manifest: dir.path().join("absent.json"),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::MissingPath { .. })));
        let cfg = RunConfig {
            ratios: vec![0.0],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let mut cfg = RunConfig::default();
        cfg.backend.kind = BackendKind::Remote;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn ratio_list() {
        assert_eq!(parse_ratios("0.1, 0.5,0.9").unwrap(), [0.1, 0.5, 0.9]);
        assert!(parse_ratios("0.1,x").is_err());
    }
}
