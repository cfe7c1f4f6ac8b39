//! Target augmentation: class spaces, the calibrated tree ensemble that
//! scores every class, and the probability vectors used as references.

pub mod boosting;
pub mod encode;
pub mod isotonic;
pub mod space;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use boosting::{fit_booster, fit_booster_traced, BoostParams, Booster, Node, RegressionTree};
pub use encode::{ordinal_encode, EncodedFeature, FeatureEncoding, OrdinalEncoder};
pub use isotonic::{fit_isotonic, pava, IsotonicFit};
pub use space::{bin_continuous, one_hot_space, serialize_class, SpaceOrigin, TargetClass, TargetSpace};

use crate::serializer::format_float;

/// Schema tag written into persisted tree-ensemble models.
pub const MODEL_SCHEMA: &str = "tabgen.tree-ensemble/v1";

/// Folds used to collect out-of-fold scores for calibration.
pub const CALIBRATION_FOLDS: usize = 3;

/// Minimum number of training rows for the tree ensemble.
pub const MIN_TRAIN_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("target space needs at least two classes")]
    SingleClass,
    #[error("{classes} classes but {explanations} explanations")]
    ExplanationCount { classes: usize, explanations: usize },
    #[error("continuous target cannot be split into four bins ({distinct} distinct values)")]
    DegenerateBins { distinct: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("input lengths differ")]
    LengthMismatch,
    #[error("need at least {MIN_TRAIN_ROWS} training rows, got {0}")]
    TooFewRows(usize),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("feature row has {found} values, model expects {expected}")]
    FeatureArity { expected: usize, found: usize },
    #[error("model file: {0}")]
    Persist(String),
}

/// Probability vector used as a training reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedTarget {
    pub probs: Vec<f64>,
    pub true_class: usize,
}

/// Index of the first maximum.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Makes `probs` agree with `true_class`: swaps the winning entry into the
/// true class, rounds to hundredths and repairs the sum to exactly 1.00 on
/// the true-class entry. If rounding leaves another class tied with or
/// above the true class, one hundredth at a time moves from that class to
/// the true class until the true class is the first maximum.
pub fn augment_probs(probs: &[f64], true_class: usize) -> Result<AugmentedTarget, AugmentError> {
    let k = probs.len();
    if true_class >= k {
        return Err(AugmentError::ClassOutOfRange {
            index: true_class,
            classes: k,
        });
    }
    let mut p = probs.to_vec();
    let top = first_argmax(&p);
    if top != true_class {
        p.swap(top, true_class);
    }
    let mut hundredths: Vec<i64> = p
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 100.0).round() as i64)
        .collect();
    let others: i64 = hundredths
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != true_class)
        .map(|(_, &v)| v)
        .sum();
    hundredths[true_class] = 100 - others;
    loop {
        let t = hundredths[true_class];
        let rival = (0..k).find(|&c| {
            (c < true_class && hundredths[c] >= t) || (c > true_class && hundredths[c] > t)
        });
        match rival {
            Some(c) => {
                hundredths[c] -= 1;
                hundredths[true_class] += 1;
            }
            None => break,
        }
    }
    Ok(AugmentedTarget {
        probs: hundredths.into_iter().map(|h| h as f64 / 100.0).collect(),
        true_class,
    })
}

/// Augmented target for one encoded row.
pub fn augment(
    model: &TreeEnsemble,
    x: &[f64],
    true_class: usize,
) -> Result<AugmentedTarget, AugmentError> {
    let p = model.predict_proba(x)?;
    augment_probs(&p, true_class)
}

/// One-hot reference (no confidence information).
pub fn one_hot_target(n_classes: usize, true_class: usize) -> Result<AugmentedTarget, AugmentError> {
    if true_class >= n_classes {
        return Err(AugmentError::ClassOutOfRange {
            index: true_class,
            classes: n_classes,
        });
    }
    let mut probs = vec![0.0; n_classes];
    probs[true_class] = 1.0;
    Ok(AugmentedTarget { probs, true_class })
}

/// `class 0: {p0}; class 1: {p1}; ...` ending in a period.
pub fn serialize_probs(probs: &[f64]) -> String {
    let body = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| format!("class {i}: {}", format_float(p, 2, 1)))
        .collect::<Vec<_>>()
        .join("; ");
    format!("{body}.")
}

pub fn serialize_target(a: &AugmentedTarget) -> String {
    serialize_probs(&a.probs)
}

/// Boosted trees followed by per-class isotonic calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub booster: Booster,
    pub calibrators: Vec<IsotonicFit>,
}

impl TreeEnsemble {
    pub fn n_classes(&self) -> usize {
        self.booster.n_classes
    }

    fn check_arity(&self, x: &[f64]) -> Result<(), AugmentError> {
        if x.len() != self.booster.n_features {
            return Err(AugmentError::FeatureArity {
                expected: self.booster.n_features,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn raw_proba(&self, x: &[f64]) -> Result<Vec<f64>, AugmentError> {
        self.check_arity(x)?;
        Ok(self.booster.predict_proba(x))
    }

    /// Calibrated class probabilities, renormalized to sum to one.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, AugmentError> {
        let raw = self.raw_proba(x)?;
        let cal: Vec<f64> = raw
            .iter()
            .zip(&self.calibrators)
            .map(|(&p, iso)| iso.predict(p).clamp(0.0, 1.0))
            .collect();
        let total: f64 = cal.iter().sum();
        if total > 0.0 {
            Ok(cal.into_iter().map(|v| v / total).collect())
        } else {
            Ok(raw)
        }
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize, AugmentError> {
        Ok(first_argmax(&self.predict_proba(x)?))
    }
}

/// Fits the boosted ensemble, then calibrates each class on out-of-fold
/// scores from a seeded 3-fold split and refits the booster on all rows.
pub fn fit_external_predictor(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &BoostParams,
    seed: u64,
) -> Result<TreeEnsemble, AugmentError> {
    if x.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    if x.len() != y.len() {
        return Err(AugmentError::LengthMismatch);
    }
    if n_classes < 2 {
        return Err(AugmentError::SingleClass);
    }
    if x.len() < MIN_TRAIN_ROWS {
        return Err(AugmentError::TooFewRows(x.len()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(AugmentError::ClassOutOfRange {
            index: bad,
            classes: n_classes,
        });
    }
    let width = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != width) {
        return Err(AugmentError::FeatureArity {
            expected: width,
            found: row.len(),
        });
    }

    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % CALIBRATION_FOLDS;
    }
    let mut oof = vec![Vec::new(); n];
    for k in 0..CALIBRATION_FOLDS {
        let (train, held): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold[i] != k);
        let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let yt: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let b = fit_booster(&xt, &yt, n_classes, params);
        for i in held {
            oof[i] = b.predict_proba(&x[i]);
        }
    }
    let calibrators = (0..n_classes)
        .map(|c| {
            let scores: Vec<f64> = oof.iter().map(|p| p[c]).collect();
            let targets: Vec<f64> = y.iter().map(|&t| f64::from(u8::from(t == c))).collect();
            fit_isotonic(&scores, &targets, None)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let booster = fit_booster(x, y, n_classes, params);
    Ok(TreeEnsemble {
        booster,
        calibrators,
    })
}

/// Persisted per-dataset model: encoder, class space and calibrated trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsembleModel {
    pub schema: String,
    pub encoder: OrdinalEncoder,
    pub space: TargetSpace,
    pub ensemble: TreeEnsemble,
}

impl TreeEnsembleModel {
    pub fn new(encoder: OrdinalEncoder, space: TargetSpace, ensemble: TreeEnsemble) -> Self {
        TreeEnsembleModel {
            schema: MODEL_SCHEMA.to_owned(),
            encoder,
            space,
            ensemble,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, AugmentError> {
        let m: TreeEnsembleModel =
            serde_json::from_str(text).map_err(|e| AugmentError::Persist(e.to_string()))?;
        if m.schema != MODEL_SCHEMA {
            return Err(AugmentError::Persist(format!(
                "unsupported schema `{}`",
                m.schema
            )));
        }
        if m.ensemble.n_classes() != m.space.len()
            || m.ensemble.calibrators.len() != m.space.len()
            || m.ensemble.booster.n_features != m.encoder.width()
        {
            return Err(AugmentError::Persist("inconsistent model dimensions".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), AugmentError> {
        fs::write(path, self.to_json()).map_err(|e| AugmentError::Persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let text = fs::read_to_string(path).map_err(|e| AugmentError::Persist(e.to_string()))?;
        Self::from_json(&text)
    }
}
