use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::ingest::Value;
use crate::serializer::format_float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetClass {
    pub index: usize,
    pub label: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpaceOrigin {
    Discrete,
    /// Quartile edges `q1 < q2 < q3`.
    Binned { edges: [f64; 3] },
}

/// Ordered class labels with their explanations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpace {
    pub classes: Vec<TargetClass>,
    pub origin: SpaceOrigin,
}

impl TargetSpace {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class index of a target cell, or `None` for missing or unknown values.
    pub fn class_of(&self, value: &Value) -> Option<usize> {
        match &self.origin {
            SpaceOrigin::Discrete => {
                let label = value.label()?;
                self.classes.iter().position(|c| c.label == label)
            }
            SpaceOrigin::Binned { edges } => {
                let v = value.as_f64()?;
                Some(edges.iter().take_while(|&&e| v >= e).count())
            }
        }
    }
}

/// Classes indexed by first appearance; explanations default to the label.
pub fn one_hot_space<S: AsRef<str>>(
    labels: &[S],
    explanations: Option<&[String]>,
) -> Result<TargetSpace, AugmentError> {
    let mut seen = HashSet::new();
    let mut distinct: Vec<&str> = Vec::new();
    for l in labels {
        if seen.insert(l.as_ref()) {
            distinct.push(l.as_ref());
        }
    }
    if distinct.len() < 2 {
        return Err(AugmentError::SingleClass);
    }
    if let Some(ex) = explanations {
        if ex.len() != distinct.len() {
            return Err(AugmentError::ExplanationCount {
                classes: distinct.len(),
                explanations: ex.len(),
            });
        }
    }
    let classes = distinct
        .into_iter()
        .enumerate()
        .map(|(index, label)| TargetClass {
            index,
            label: label.to_owned(),
            explanation: explanations
                .map(|ex| ex[index].clone())
                .unwrap_or_else(|| label.to_owned()),
        })
        .collect();
    Ok(TargetSpace {
        classes,
        origin: SpaceOrigin::Discrete,
    })
}

/// Empirical percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn round_significant(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let magnitude = v.abs().log10().floor() as i32 + 1;
    let shift = digits - magnitude;
    if shift >= 0 {
        let scale = 10f64.powi(shift);
        (v * scale).round() / scale
    } else {
        let scale = 10f64.powi(-shift);
        (v / scale).round() * scale
    }
}

fn edge_labels(edges: &[f64; 3]) -> Vec<String> {
    // Three significant figures unless that would merge two edges.
    for digits in 3..=15 {
        let e: Vec<String> = edges
            .iter()
            .map(|&x| format_float(round_significant(x, digits), 6, 1))
            .collect();
        if e[0] != e[1] && e[1] != e[2] {
            return vec![
                format!("<{}", e[0]),
                format!("{} - {}", e[0], e[1]),
                format!("{} - {}", e[1], e[2]),
                format!(">{}", e[2]),
            ];
        }
    }
    let e: Vec<String> = edges.iter().map(|x| format!("{x:?}")).collect();
    vec![
        format!("<{}", e[0]),
        format!("{} - {}", e[0], e[1]),
        format!("{} - {}", e[1], e[2]),
        format!(">{}", e[2]),
    ]
}

/// Four quartile classes over a continuous target, in ascending order.
pub fn bin_continuous(values: &[f64]) -> Result<TargetSpace, AugmentError> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(AugmentError::DegenerateBins {
            distinct: distinct.len(),
        });
    }
    let edges = [
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.5),
        percentile(&sorted, 0.75),
    ];
    if !(edges[0] < edges[1] && edges[1] < edges[2]) {
        return Err(AugmentError::DegenerateBins {
            distinct: distinct.len(),
        });
    }
    let classes = edge_labels(&edges)
        .into_iter()
        .enumerate()
        .map(|(index, label)| TargetClass {
            index,
            explanation: label.clone(),
            label,
        })
        .collect();
    Ok(TargetSpace {
        classes,
        origin: SpaceOrigin::Binned { edges },
    })
}

/// `class {t} stands for "{e}"` clauses joined by `"; "`.
pub fn serialize_class(space: &TargetSpace) -> String {
    space
        .classes
        .iter()
        .map(|c| format!("class {} stands for \"{}\"", c.index, c.explanation))
        .collect::<Vec<_>>()
        .join("; ")
}
