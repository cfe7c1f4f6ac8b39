//! Glue between the stages: registry loading, metadata resolution, per-split
//! preparation (class space, fitted ensemble) and corpus building.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::augmentor::{
    augment, bin_continuous, fit_external_predictor, one_hot_space, one_hot_target,
    serialize_target, AugmentError, BoostParams, OrdinalEncoder, TargetSpace, TreeEnsembleModel,
};
use crate::baselines::MlpParams;
use crate::config::Seeds;
use crate::error::{Error, Result};
use crate::evalharness::{SweepDataset, TestItem};
use crate::ingest::{
    apply_cutoff, detect_target_kind, split, Dataset, IngestError, Manifest, SplitSpec, TargetKind,
    DEFAULT_MAX_ROWS,
};
use crate::metadata::{reformat, ChatClient, MetadataCache, MetadataSource, ReformatPolicy, ReformattedMetadata};
use crate::promptgen::{
    assemble_prompt, build_instruction, emit_corpus, AugmentationMode, CorpusInput, CorpusManifest,
    PromptError, Variant,
};
use crate::serializer::{serialize_features, SerializationConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub max_rows: usize,
    pub seeds: Seeds,
    pub variant: Variant,
    pub mode: AugmentationMode,
    pub serialization: SerializationConfig,
    pub boost: BoostParams,
    pub mlp: MlpParams,
    pub max_new_tokens: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            max_rows: DEFAULT_MAX_ROWS,
            seeds: Seeds::default(),
            variant: Variant::Heavy,
            mode: AugmentationMode::Augmented,
            serialization: SerializationConfig::default(),
            boost: BoostParams::default(),
            mlp: MlpParams::default(),
            max_new_tokens: crate::backends::DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Loads every manifest entry and applies the row cutoff. The first load
/// failure is returned, naming its entry.
pub fn load_registry(manifest: &Manifest, max_rows: usize, cutoff_seed: u64) -> Result<Vec<Dataset>> {
    manifest
        .load_all()
        .into_iter()
        .map(|r| r.map(|d| apply_cutoff(d, max_rows, cutoff_seed)).map_err(Error::from))
        .collect()
}

/// Sets the target column from the reformatted metadata unless the
/// manifest already named one.
pub fn apply_metadata_target(d: &mut Dataset, meta: &ReformattedMetadata) -> Result<()> {
    match &d.target_column {
        Some(hint) => {
            if hint != &meta.target {
                log::warn!(
                    "dataset `{}`: manifest target `{hint}` overrides metadata target `{}`",
                    d.id,
                    meta.target
                );
            }
        }
        None => {
            let name = d
                .resolve_column(&meta.target)
                .ok_or_else(|| IngestError::UnknownColumn {
                    dataset: d.id.clone(),
                    column: meta.target.clone(),
                })?
                .to_owned();
            d.target_column = Some(name);
        }
    }
    Ok(())
}

/// Removes rows whose target cell is missing.
pub fn drop_missing_targets(d: &Dataset) -> Result<Dataset> {
    let t = d.target_index().ok_or_else(|| IngestError::TargetUnset {
        dataset: d.id.clone(),
    })?;
    let rows: Vec<_> = d.rows.iter().filter(|r| !r.cells[t].is_missing()).cloned().collect();
    if rows.len() < d.rows.len() {
        log::info!(
            "dataset `{}`: dropped {} rows with a missing target",
            d.id,
            d.rows.len() - rows.len()
        );
    }
    Ok(d.with_rows(rows))
}

/// Reformats metadata for every dataset (cached, in parallel), fixes the
/// target and drops rows without a target value.
pub fn resolve_registry(
    datasets: Vec<Dataset>,
    client: Option<&dyn ChatClient>,
    cache: &MetadataCache,
    policy: ReformatPolicy,
) -> Result<Vec<SweepDataset>> {
    datasets
        .into_par_iter()
        .map(|mut d| {
            let (metadata, source) = reformat(&d, client, cache, policy)?;
            if source == MetadataSource::Fallback {
                log::info!("dataset `{}`: using fallback metadata", d.id);
            }
            apply_metadata_target(&mut d, &metadata)?;
            let dataset = drop_missing_targets(&d)?;
            Ok(SweepDataset { dataset, metadata })
        })
        .collect()
}

/// Class space of a split. Discrete labels are numbered by first
/// appearance, training rows first; continuous targets are binned at the
/// training quartiles.
pub fn build_space(full: &Dataset, train: &Dataset, test: &Dataset) -> Result<TargetSpace> {
    let t = full.target_index().ok_or_else(|| IngestError::TargetUnset {
        dataset: full.id.clone(),
    })?;
    match detect_target_kind(full)? {
        TargetKind::Discrete { .. } => {
            let labels: Vec<String> = train
                .rows
                .iter()
                .chain(&test.rows)
                .filter_map(|r| r.cells[t].label())
                .collect();
            Ok(one_hot_space(&labels, None)?)
        }
        TargetKind::Continuous { .. } => {
            let values: Vec<f64> = train.rows.iter().filter_map(|r| r.cells[t].as_f64()).collect();
            Ok(bin_continuous(&values)?)
        }
    }
}

fn class_indices(d: &Dataset, space: &TargetSpace) -> Result<Vec<usize>> {
    let t = d.target_index().ok_or_else(|| IngestError::TargetUnset {
        dataset: d.id.clone(),
    })?;
    d.rows
        .iter()
        .map(|r| {
            space.class_of(&r.cells[t]).ok_or_else(|| {
                Error::from(PromptError::UnmappedTarget {
                    dataset: d.id.clone(),
                    row: r.id,
                })
            })
        })
        .collect()
}

/// Encodes the training rows and fits the calibrated ensemble.
pub fn fit_tree_model(
    train: &Dataset,
    space: &TargetSpace,
    y: &[usize],
    params: &BoostParams,
    seed: u64,
) -> std::result::Result<TreeEnsembleModel, AugmentError> {
    let encoder = OrdinalEncoder::fit(&train.rows, &train.columns, train.target_index());
    let x = encoder.transform(&train.rows);
    let ensemble = fit_external_predictor(&x, y, space.len(), params, seed)?;
    Ok(TreeEnsembleModel::new(encoder, space.clone(), ensemble))
}

/// One dataset at one train ratio, ready for corpus emission or evaluation.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub dataset_id: String,
    pub split: SplitSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub metadata: ReformattedMetadata,
    pub space: TargetSpace,
    pub train_y: Vec<usize>,
    pub test_y: Vec<usize>,
    pub model: Option<Arc<TreeEnsembleModel>>,
    /// Why `model` is absent, when fitting failed.
    pub model_error: Option<String>,
}

fn prepare(
    d: &Dataset,
    meta: &ReformattedMetadata,
    spec: SplitSpec,
    settings: &PipelineSettings,
    fit: bool,
) -> Result<PreparedSplit> {
    let (train, test) = split(d, spec)?;
    let space = build_space(d, &train, &test)?;
    let train_y = class_indices(&train, &space)?;
    let test_y = class_indices(&test, &space)?;
    let (model, model_error) = if fit {
        match fit_tree_model(&train, &space, &train_y, &settings.boost, settings.seeds.training) {
            Ok(m) => (Some(Arc::new(m)), None),
            Err(e) => {
                log::warn!("dataset `{}` at ratio {}: {e}", d.id, spec.train_ratio);
                (None, Some(e.to_string()))
            }
        }
    } else {
        (None, None)
    };
    Ok(PreparedSplit {
        dataset_id: d.id.clone(),
        split: spec,
        train,
        test,
        metadata: meta.clone(),
        space,
        train_y,
        test_y,
        model,
        model_error,
    })
}

/// Splits, builds the class space and fits the tree ensemble on the
/// training rows. A failed fit is recorded in `model_error`, not returned.
pub fn prepare_split(
    d: &Dataset,
    meta: &ReformattedMetadata,
    spec: SplitSpec,
    settings: &PipelineSettings,
) -> Result<PreparedSplit> {
    prepare(d, meta, spec, settings, true)
}

impl PreparedSplit {
    /// Prompts for the test rows.
    pub fn test_items(
        &self,
        variant: Variant,
        cfg: &SerializationConfig,
    ) -> std::result::Result<Vec<TestItem>, PromptError> {
        let instructions = build_instruction(&self.space)?;
        self.test
            .rows
            .iter()
            .zip(&self.test_y)
            .map(|(row, &true_class)| {
                let features = serialize_features(row, &self.test, cfg);
                Ok(TestItem {
                    row_id: row.id,
                    prompt: assemble_prompt(variant, Some(&self.metadata), &features, &instructions)?,
                    true_class,
                })
            })
            .collect()
    }

    /// Reference texts for the test rows: augmented when a model exists,
    /// one-hot otherwise.
    pub fn test_references(&self) -> std::result::Result<Vec<(usize, String)>, AugmentError> {
        self.test
            .rows
            .iter()
            .zip(&self.test_y)
            .map(|(row, &t)| {
                let target = match &self.model {
                    Some(m) => augment(&m.ensemble, &m.encoder.transform_row(row), t)?,
                    None => one_hot_target(self.space.len(), t)?,
                };
                Ok((row.id, serialize_target(&target)))
            })
            .collect()
    }

    /// Ordinal-encoded train and test matrices, using the model's encoder
    /// when there is one.
    pub fn encoded(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let fresh;
        let enc = match &self.model {
            Some(m) => &m.encoder,
            None => {
                fresh = OrdinalEncoder::fit(&self.train.rows, &self.train.columns, self.train.target_index());
                &fresh
            }
        };
        (enc.transform(&self.train.rows), enc.transform(&self.test.rows))
    }

    pub fn corpus_input(&self) -> CorpusInput<'_> {
        CorpusInput {
            train: &self.train,
            metadata: Some(&self.metadata),
            space: &self.space,
            model: self.model.as_deref(),
        }
    }
}

/// Directory next to a corpus file where the fitted ensembles are saved.
pub fn models_dir(corpus: &Path) -> std::path::PathBuf {
    corpus.parent().unwrap_or(Path::new(".")).join("models")
}

/// Splits every dataset at `train_ratio` and writes the training corpus for
/// the configured variant and mode to `out`. In augmented mode the fitted
/// ensembles go to [`models_dir`] as `<dataset_id>.model.json`.
pub fn build_corpus(
    registry: &[SweepDataset],
    train_ratio: f64,
    settings: &PipelineSettings,
    out: &Path,
) -> Result<CorpusManifest> {
    let spec = SplitSpec::new(train_ratio, settings.seeds.split)?;
    let fit = settings.mode == AugmentationMode::Augmented;
    let prepared: Vec<PreparedSplit> = registry
        .par_iter()
        .map(|sd| prepare(&sd.dataset, &sd.metadata, spec, settings, fit))
        .collect::<Result<_>>()?;
    if fit {
        if let Some(p) = prepared.iter().find(|p| p.model.is_none()) {
            return Err(Error::Pipeline(format!(
                "dataset `{}`: cannot fit the tree ensemble: {}",
                p.dataset_id,
                p.model_error.as_deref().unwrap_or("unknown error")
            )));
        }
        let dir = models_dir(out);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::Pipeline(format!("cannot create {}: {e}", dir.display())))?;
        for p in &prepared {
            if let Some(m) = &p.model {
                m.save(&dir.join(format!("{}.model.json", p.dataset_id)))?;
            }
        }
    }
    let inputs: Vec<CorpusInput<'_>> = prepared.iter().map(PreparedSplit::corpus_input).collect();
    Ok(emit_corpus(
        &inputs,
        settings.variant,
        settings.mode,
        &settings.serialization,
        settings.seeds,
        out,
    )?)
}

/// Default corpus file name for a variant and mode.
pub fn corpus_file_name(variant: Variant, mode: AugmentationMode) -> String {
    format!("corpus-{variant}-{mode}.jsonl")
}
