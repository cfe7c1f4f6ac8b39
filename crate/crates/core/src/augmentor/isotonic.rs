//! Weighted isotonic regression by pool-adjacent-violators.

use serde::{Deserialize, Serialize};

use super::AugmentError;

/// Monotone step function learned from (score, target) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    /// Distinct scores seen during fitting, strictly ascending.
    pub breakpoints: Vec<f64>,
    /// Fitted value at each breakpoint, nondecreasing.
    pub values: Vec<f64>,
}

impl IsotonicFit {
    /// Value of the step containing `x`; clamps outside the fitted range.
    pub fn predict(&self, x: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= x);
        self.values[idx.saturating_sub(1)]
    }
}

/// Solves `min Σ w_i (f_i - y_i)^2` subject to `f_0 <= f_1 <= ...` for a
/// sequence already in score order.
pub fn pava(y: &[f64], w: &[f64]) -> Vec<f64> {
    // Blocks as (mean, weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        blocks.push((yi, wi, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            let wt = w1 + w2;
            let mean = if wt > 0.0 {
                (m1 * w1 + m2 * w2) / wt
            } else {
                (m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64
            };
            blocks.pop();
            *blocks.last_mut().unwrap() = (mean, wt, n1 + n2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, n)| std::iter::repeat_n(m, n))
        .collect()
}

pub fn fit_isotonic(
    scores: &[f64],
    targets: &[f64],
    weights: Option<&[f64]>,
) -> Result<IsotonicFit, AugmentError> {
    if scores.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    if scores.len() != targets.len() || weights.is_some_and(|w| w.len() != scores.len()) {
        return Err(AugmentError::LengthMismatch);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Tied scores collapse to one weighted point first.
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for i in order {
        let w = weights.map_or(1.0, |w| w[i]);
        match xs.last() {
            Some(&x) if x == scores[i] => {
                let j = ys.len() - 1;
                let total = ws[j] + w;
                if total > 0.0 {
                    ys[j] = (ys[j] * ws[j] + targets[i] * w) / total;
                }
                ws[j] = total;
            }
            _ => {
                xs.push(scores[i]);
                ys.push(targets[i]);
                ws.push(w);
            }
        }
    }
    let values = pava(&ys, &ws);
    Ok(IsotonicFit {
        breakpoints: xs,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasible_input_is_unchanged() {
        let y = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(pava(&y, &[1.0; 4]), y);
    }

    #[test]
    fn pools_violators() {
        assert_eq!(pava(&[3.0, 1.0, 2.0], &[1.0; 3]), [2.0, 2.0, 2.0]);
        assert_eq!(pava(&[1.0, 3.0, 2.0], &[1.0, 1.0, 3.0]), [1.0, 2.25, 2.25]);
    }

    #[test]
    fn single_point() {
        let f = fit_isotonic(&[0.4], &[1.0], None).unwrap();
        assert_eq!(f.values, [1.0]);
        assert_eq!(f.predict(-3.0), 1.0);
        assert_eq!(f.predict(7.0), 1.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(fit_isotonic(&[], &[], None), Err(AugmentError::EmptyInput)));
        assert!(matches!(fit_isotonic(&[1.0], &[], None), Err(AugmentError::LengthMismatch)));
    }

    #[test]
    fn ties_and_step_prediction() {
        let f = fit_isotonic(&[0.1, 0.5, 0.5, 0.9], &[0.0, 1.0, 0.0, 1.0], None).unwrap();
        assert_eq!(f.breakpoints, [0.1, 0.5, 0.9]);
        assert_eq!(f.values, [0.0, 0.5, 1.0]);
        assert_eq!(f.predict(0.0), 0.0);
        assert_eq!(f.predict(0.3), 0.0);
        assert_eq!(f.predict(0.5), 0.5);
        assert_eq!(f.predict(0.89), 0.5);
        assert_eq!(f.predict(2.0), 1.0);
    }
}
