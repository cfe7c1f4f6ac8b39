//! Turn tabular datasets into instruction-tuning prompt/target pairs with
//! confidence-augmented targets, and evaluate generative tabular predictors
//! end to end.
//!
//! The data path is:
//!
//! 1. [`ingest`] loads CSV files through a JSON manifest, infers column kinds,
//!    applies the row cutoff and produces deterministic train/test splits.
//! 2. [`metadata`] asks a chat-completion service to name the target and
//!    describe the features (cached, with an offline fallback).
//! 3. [`serializer`] renders rows as `"{column} is {value}; ..."` text.
//! 4. [`augmentor`] builds the class space, fits a calibrated gradient-boosted
//!    tree ensemble and turns labels into probability vectors.
//! 5. [`promptgen`] assembles the prompts and writes the JSONL corpus.
//! 6. [`outparse`] maps generated text back to a class.
//! 7. [`backends`], [`baselines`] and [`evalharness`] run the evaluation.

pub mod augmentor;
pub mod backends;
pub mod baselines;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod ingest;
pub mod metadata;
pub mod outparse;
pub mod pipeline;
pub mod promptgen;
pub mod serializer;

pub use error::{Error, Result};
