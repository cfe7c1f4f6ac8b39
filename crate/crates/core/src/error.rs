use thiserror::Error;

use crate::augmentor::AugmentError;
use crate::backends::BackendError;
use crate::baselines::MlpError;
use crate::config::ConfigError;
use crate::evalharness::HarnessError;
use crate::ingest::IngestError;
use crate::metadata::MetadataError;
use crate::promptgen::PromptError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Umbrella error for the pipeline glue and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Pipeline(String),
}
