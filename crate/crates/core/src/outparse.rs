//! Maps generated text back to a probability vector and a class.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::augmentor::first_argmax;

/// Decimal numbers with a mandatory fractional part (`.5`, `0.86`).
static PROB_PATTERN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[0-9]*[.][0-9]+").expect("valid pattern"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Truncated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub probs: Vec<f64>,
    pub predicted_class: Option<usize>,
    pub status: ParseStatus,
}

impl ParsedPrediction {
    /// Only fully parsed predictions can be scored as correct.
    pub fn is_correct(&self, true_class: usize) -> bool {
        self.status == ParseStatus::Ok && self.predicted_class == Some(true_class)
    }
}

/// Every decimal in `text`, in order of appearance.
pub fn extract_probs(text: &str) -> Vec<f64> {
    PROB_PATTERN
        .find_iter(text)
        .filter_map(|m| m.as_str().parse().ok())
        .collect()
}

pub fn map_to_class(probs: Vec<f64>, expected: usize) -> ParsedPrediction {
    let (status, predicted_class) = if probs.is_empty() || probs.len() > expected {
        (ParseStatus::Failed, None)
    } else if probs.len() < expected {
        (ParseStatus::Truncated, Some(first_argmax(&probs)))
    } else {
        (ParseStatus::Ok, Some(first_argmax(&probs)))
    };
    ParsedPrediction {
        probs,
        predicted_class,
        status,
    }
}

pub fn parse_prediction(text: &str, expected: usize) -> ParsedPrediction {
    map_to_class(extract_probs(text), expected)
}
