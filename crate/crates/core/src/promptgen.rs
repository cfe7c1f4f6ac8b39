//! Prompt assembly and instruction-tuning corpus emission.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augmentor::{
    augment, one_hot_target, serialize_class, serialize_target, AugmentError, TargetSpace,
    TreeEnsembleModel,
};
use crate::config::Seeds;
use crate::ingest::Dataset;
use crate::metadata::ReformattedMetadata;
use crate::serializer::{serialize_features, SerializationConfig};

/// Schema tag of the corpus manifest.
pub const CORPUS_SCHEMA: &str = "tabgen.corpus/v1";

const HEAVY_TEMPLATE: &str = "Below is the description of a dataset, an object profile from the dataset and a target description. Predict the target by the given information of the object.\n# Dataset description: {metadata}\n# Object description: {features}\n# You should return the probability of each class by: \n{instructions}\n# Answer: \n";

const LIGHT_TEMPLATE: &str = "Below is a dataset. Predict the target by the given information of the object.\n# Object description: {features}\n# You should return the probability of each class by: \n{instructions}\n# Answer: \n";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("heavy prompts need dataset metadata")]
    MissingMetadata,
    #[error("prompt slot `{0}` is empty")]
    EmptySlot(&'static str),
    #[error("target space needs at least two classes")]
    TooFewClasses,
    #[error("dataset `{0}` has no fitted model for augmented references")]
    MissingModel(String),
    #[error("dataset `{dataset}` row {row}: target value outside the class space")]
    UnmappedTarget { dataset: String, row: usize },
    #[error("dataset `{0}` has no target column")]
    NoTarget(String),
    #[error("dataset `{dataset}`: {source}")]
    Augment {
        dataset: String,
        #[source]
        source: AugmentError,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Heavy,
    Light,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationMode {
    Augmented,
    Onehot,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Heavy => "heavy",
            Variant::Light => "light",
        }
    }
}

impl AugmentationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationMode::Augmented => "augmented",
            AugmentationMode::Onehot => "onehot",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AugmentationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "heavy" => Ok(Variant::Heavy),
            "light" => Ok(Variant::Light),
            _ => Err(format!("unknown prompt variant `{s}` (expected heavy or light)")),
        }
    }
}

impl FromStr for AugmentationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "augmented" => Ok(AugmentationMode::Augmented),
            "onehot" => Ok(AugmentationMode::Onehot),
            _ => Err(format!("unknown augmentation mode `{s}` (expected augmented or onehot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub dataset_id: String,
    pub row_id: usize,
    pub variant: Variant,
    pub prompt: String,
    pub reference: String,
    pub class_details: String,
    pub num_classes: usize,
    pub true_class: usize,
    /// Prompt length in characters, for consumers that filter long prompts.
    pub prompt_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: String,
    pub record_count: usize,
    pub per_dataset: BTreeMap<String, usize>,
    pub variant: Variant,
    pub mode: AugmentationMode,
    pub seeds: Seeds,
    /// Hex SHA-256 of the corpus file bytes.
    pub content_hash: String,
}

/// The `{instructions}` slot: one clause per class.
pub fn build_instruction(space: &TargetSpace) -> Result<String, PromptError> {
    if space.len() < 2 {
        return Err(PromptError::TooFewClasses);
    }
    Ok(serialize_class(space))
}

pub fn assemble_prompt(
    variant: Variant,
    meta: Option<&ReformattedMetadata>,
    features: &str,
    instructions: &str,
) -> Result<String, PromptError> {
    if features.is_empty() {
        return Err(PromptError::EmptySlot("features"));
    }
    if instructions.is_empty() {
        return Err(PromptError::EmptySlot("instructions"));
    }
    match variant {
        Variant::Heavy => {
            let description = meta
                .map(|m| m.description.as_str())
                .filter(|d| !d.trim().is_empty())
                .ok_or(PromptError::MissingMetadata)?;
            Ok(fill(
                HEAVY_TEMPLATE,
                &[("metadata", description), ("features", features), ("instructions", instructions)],
            ))
        }
        Variant::Light => Ok(fill(
            LIGHT_TEMPLATE,
            &[("features", features), ("instructions", instructions)],
        )),
    }
}

/// Single pass over the template, so slot markers inside the substituted
/// text stay literal.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + slots.iter().map(|s| s.1.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = slots.iter().find_map(|(name, value)| {
            after
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('}'))
                .map(|r| (value, r))
        });
        match hit {
            Some((value, r)) => {
                out.push_str(value);
                rest = r;
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Everything needed to emit one dataset's training records.
#[derive(Debug, Clone)]
pub struct CorpusInput<'a> {
    /// Training rows; the target column must be set.
    pub train: &'a Dataset,
    pub metadata: Option<&'a ReformattedMetadata>,
    pub space: &'a TargetSpace,
    pub model: Option<&'a TreeEnsembleModel>,
}

fn records_for(
    input: &CorpusInput<'_>,
    variant: Variant,
    mode: AugmentationMode,
    cfg: &SerializationConfig,
) -> Result<Vec<CorpusRecord>, PromptError> {
    let d = input.train;
    let target = d
        .target_index()
        .ok_or_else(|| PromptError::NoTarget(d.id.clone()))?;
    let instructions = build_instruction(input.space)?;
    let model = match mode {
        AugmentationMode::Augmented => {
            Some(input.model.ok_or_else(|| PromptError::MissingModel(d.id.clone()))?)
        }
        AugmentationMode::Onehot => None,
    };
    let augment_err = |source| PromptError::Augment {
        dataset: d.id.clone(),
        source,
    };
    let mut out = Vec::with_capacity(d.rows.len());
    for row in &d.rows {
        let true_class = input
            .space
            .class_of(&row.cells[target])
            .ok_or_else(|| PromptError::UnmappedTarget {
                dataset: d.id.clone(),
                row: row.id,
            })?;
        let reference = match model {
            Some(m) => {
                let x = m.encoder.transform_row(row);
                augment(&m.ensemble, &x, true_class).map_err(augment_err)?
            }
            None => one_hot_target(input.space.len(), true_class).map_err(augment_err)?,
        };
        let features = serialize_features(row, d, cfg);
        let prompt = assemble_prompt(variant, input.metadata, &features, &instructions)?;
        out.push(CorpusRecord {
            dataset_id: d.id.clone(),
            row_id: row.id,
            variant,
            prompt_length: prompt.chars().count(),
            prompt,
            reference: serialize_target(&reference),
            class_details: instructions.clone(),
            num_classes: input.space.len(),
            true_class,
        });
    }
    Ok(out)
}

/// Builds all records, sorted by `(dataset_id, row_id)`.
pub fn build_records(
    inputs: &[CorpusInput<'_>],
    variant: Variant,
    mode: AugmentationMode,
    cfg: &SerializationConfig,
) -> Result<Vec<CorpusRecord>, PromptError> {
    let per: Vec<Vec<CorpusRecord>> = inputs
        .par_iter()
        .map(|i| records_for(i, variant, mode, cfg))
        .collect::<Result<_, _>>()?;
    let mut all: Vec<CorpusRecord> = per.into_iter().flatten().collect();
    all.sort_by(|a, b| (&a.dataset_id, a.row_id).cmp(&(&b.dataset_id, b.row_id)));
    Ok(all)
}

/// Writes records as line-delimited JSON into `sink`, returning the manifest.
pub fn write_corpus<W: Write>(
    records: &[CorpusRecord],
    variant: Variant,
    mode: AugmentationMode,
    seeds: Seeds,
    mut sink: W,
) -> std::io::Result<CorpusManifest> {
    let mut hasher = Sha256::new();
    let mut per_dataset = BTreeMap::new();
    for r in records {
        let mut line = serde_json::to_vec(r).expect("record serializes");
        line.push(b'\n');
        hasher.update(&line);
        sink.write_all(&line)?;
        *per_dataset.entry(r.dataset_id.clone()).or_insert(0) += 1;
    }
    sink.flush()?;
    Ok(CorpusManifest {
        schema: CORPUS_SCHEMA.to_owned(),
        record_count: records.len(),
        per_dataset,
        variant,
        mode,
        seeds,
        content_hash: hex::encode(hasher.finalize()),
    })
}

/// Sibling manifest path: `corpus.jsonl` → `corpus.manifest.json`.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("manifest.json")
}

/// Emits the corpus file at `out` and its manifest next to it.
pub fn emit_corpus(
    inputs: &[CorpusInput<'_>],
    variant: Variant,
    mode: AugmentationMode,
    cfg: &SerializationConfig,
    seeds: Seeds,
    out: &Path,
) -> Result<CorpusManifest, PromptError> {
    let records = build_records(inputs, variant, mode, cfg)?;
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| PromptError::Io { path, source }
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(out).map_err(io_err(out))?;
    let manifest = write_corpus(&records, variant, mode, seeds, std::io::BufWriter::new(file))
        .map_err(io_err(out))?;
    let mpath = manifest_path(out);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, body + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}
