//! One-hidden-layer MLP baseline (ReLU, softmax cross-entropy, Adam).
//! The tree-ensemble baseline is the augmentor's model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentor::first_argmax;
use crate::augmentor::boosting::softmax;

pub const MLP_SCHEMA: &str = "tabgen.mlp/v1";

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("training labels cover fewer than two classes")]
    SingleClass,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite input at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("feature row has {found} values, model expects {expected}")]
    Arity { expected: usize, found: usize },
    #[error("input lengths differ")]
    LengthMismatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("model file: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: usize,
    pub learning_rate: f64,
    /// Full-batch Adam steps.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden: 100,
            learning_rate: 1e-3,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Raw network weights, row-major: `w1` is hidden × inputs, `w2` is
/// classes × hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub n_inputs: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Network {
    pub fn zeros(n_inputs: usize, hidden: usize, n_classes: usize) -> Self {
        Network {
            n_inputs,
            hidden,
            n_classes,
            w1: vec![0.0; hidden * n_inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; n_classes * hidden],
            b2: vec![0.0; n_classes],
        }
    }

    /// Glorot-uniform weights and biases, as in common toolkits.
    pub fn init(n_inputs: usize, hidden: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let mut net = Network::zeros(n_inputs, hidden, n_classes);
        let l1 = (6.0 / (n_inputs + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + n_classes) as f64).sqrt();
        for v in net.w1.iter_mut().chain(net.b1.iter_mut()) {
            *v = rng.gen_range(-l1..l1);
        }
        for v in net.w2.iter_mut().chain(net.b2.iter_mut()) {
            *v = rng.gen_range(-l2..l2);
        }
        net
    }

    fn hidden_layer(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let w = &self.w1[j * self.n_inputs..(j + 1) * self.n_inputs];
                let z = self.b1[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                z.max(0.0)
            })
            .collect()
    }

    fn output_layer(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|k| {
                let w = &self.w2[k * self.hidden..(k + 1) * self.hidden];
                self.b2[k] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.output_layer(&self.hidden_layer(x))
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters as one flat vector (w1, b1, w2, b2).
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }
}

/// Mean cross-entropy over the rows and its gradient, flattened in the same
/// layout as [`Network::flatten`].
pub fn loss_and_gradients(net: &Network, x: &[Vec<f64>], y: &[usize]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mut g = Network::zeros(net.n_inputs, net.hidden, net.n_classes);
    let mut loss = 0.0;
    for (row, &t) in x.iter().zip(y) {
        let h = net.hidden_layer(row);
        let p = softmax(&net.output_layer(&h));
        loss -= p[t].max(1e-300).ln();
        let mut dh = vec![0.0; net.hidden];
        for k in 0..net.n_classes {
            let d = (p[k] - f64::from(u8::from(k == t))) / n;
            g.b2[k] += d;
            for j in 0..net.hidden {
                g.w2[k * net.hidden + j] += d * h[j];
                dh[j] += d * net.w2[k * net.hidden + j];
            }
        }
        for j in 0..net.hidden {
            if h[j] <= 0.0 {
                continue;
            }
            g.b1[j] += dh[j];
            for (i, xi) in row.iter().enumerate() {
                g.w1[j * net.n_inputs + i] += dh[j] * xi;
            }
        }
    }
    (loss / n, g.flatten())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub schema: String,
    pub network: Network,
    /// Per-column mean and scale; constant columns keep mean 0, scale 1.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl MlpModel {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        if x.len() != self.network.n_inputs {
            return Err(MlpError::Arity {
                expected: self.network.n_inputs,
                found: x.len(),
            });
        }
        Ok(softmax(&self.network.logits(&self.standardize(x))))
    }

    /// The same function with standardization folded into the first layer.
    pub fn fold_standardization(&self) -> MlpModel {
        let mut net = self.network.clone();
        let d = net.n_inputs;
        for j in 0..net.hidden {
            let mut shift = 0.0;
            for i in 0..d {
                let w = net.w1[j * d + i] / self.scale[i];
                net.w1[j * d + i] = w;
                shift += w * self.mean[i];
            }
            net.b1[j] -= shift;
        }
        MlpModel {
            schema: self.schema.clone(),
            network: net,
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MlpError> {
        let m: MlpModel = serde_json::from_str(text).map_err(|e| MlpError::Persist(e.to_string()))?;
        if m.schema != MLP_SCHEMA {
            return Err(MlpError::Persist(format!("unsupported schema `{}`", m.schema)));
        }
        let n = &m.network;
        if m.mean.len() != n.n_inputs
            || m.scale.len() != n.n_inputs
            || n.w1.len() != n.hidden * n.n_inputs
            || n.b1.len() != n.hidden
            || n.w2.len() != n.n_classes * n.hidden
            || n.b2.len() != n.n_classes
        {
            return Err(MlpError::Persist("inconsistent model dimensions".into()));
        }
        Ok(m)
    }
}

fn check_inputs(x: &[Vec<f64>], width: usize) -> Result<(), MlpError> {
    for (r, row) in x.iter().enumerate() {
        if row.len() != width {
            return Err(MlpError::Arity {
                expected: width,
                found: row.len(),
            });
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(MlpError::NonFinite { row: r, col: c });
        }
    }
    Ok(())
}

/// Trains on standardized features with full-batch Adam.
pub fn fit_mlp(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &MlpParams,
    seed: u64,
) -> Result<MlpModel, MlpError> {
    fit_mlp_traced(x, y, n_classes, params, seed).map(|(m, _)| m)
}

/// Like [`fit_mlp`], also returning the training loss before each step.
pub fn fit_mlp_traced(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &MlpParams,
    seed: u64,
) -> Result<(MlpModel, Vec<f64>), MlpError> {
    if x.len() != y.len() {
        return Err(MlpError::LengthMismatch);
    }
    if x.len() < 2 {
        return Err(MlpError::TooFewSamples(x.len()));
    }
    if let Some(&label) = y.iter().find(|&&c| c >= n_classes) {
        return Err(MlpError::LabelOutOfRange {
            label,
            classes: n_classes,
        });
    }
    if n_classes < 2 || y.iter().all(|&c| c == y[0]) {
        return Err(MlpError::SingleClass);
    }
    let d = x[0].len();
    check_inputs(x, d)?;

    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for i in 0..d {
        let m = x.iter().map(|r| r[i]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n;
        if var.sqrt() > 1e-12 {
            mean[i] = m;
            scale[i] = var.sqrt();
        }
    }
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|i| (r[i] - mean[i]) / scale[i]).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(d, params.hidden.max(1), n_classes, &mut rng);
    let mut theta = net.flatten();
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    let mut trace = Vec::with_capacity(params.epochs);
    for step in 1..=params.epochs {
        let (loss, g) = loss_and_gradients(&net, &xs, y);
        trace.push(loss);
        let c1 = 1.0 - params.beta1.powi(step as i32);
        let c2 = 1.0 - params.beta2.powi(step as i32);
        for k in 0..theta.len() {
            m1[k] = params.beta1 * m1[k] + (1.0 - params.beta1) * g[k];
            m2[k] = params.beta2 * m2[k] + (1.0 - params.beta2) * g[k] * g[k];
            theta[k] -= params.learning_rate * (m1[k] / c1) / ((m2[k] / c2).sqrt() + params.epsilon);
        }
        net.set_flat(&theta);
    }
    Ok((
        MlpModel {
            schema: MLP_SCHEMA.to_owned(),
            network: net,
            mean,
            scale,
        },
        trace,
    ))
}

/// First-max class per row.
pub fn predict_mlp(m: &MlpModel, x: &[Vec<f64>]) -> Result<Vec<usize>, MlpError> {
    x.iter()
        .map(|r| m.predict_proba(r).map(|p| first_argmax(&p)))
        .collect()
}

/// Per-column means over finite entries (0 when a column has none).
pub fn column_means(x: &[Vec<f64>]) -> Vec<f64> {
    let Some(width) = x.first().map(Vec::len) else {
        return Vec::new();
    };
    (0..width)
        .map(|i| {
            let (sum, count) = x
                .iter()
                .map(|r| r[i])
                .filter(|v| v.is_finite())
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Replaces non-finite entries with the given column values.
pub fn impute(x: &mut [Vec<f64>], fill: &[f64]) {
    for row in x {
        for (v, f) in row.iter_mut().zip(fill) {
            if !v.is_finite() {
                *v = *f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            x.push(vec![centre + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0) * 10.0 + 50.0]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn zero_network_predicts_class_zero() {
        let m = MlpModel {
            schema: MLP_SCHEMA.into(),
            network: Network::zeros(3, 4, 3),
            mean: vec![0.0; 3],
            scale: vec![1.0; 3],
        };
        assert_eq!(predict_mlp(&m, &[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0]]).unwrap(), [0, 0]);
        assert_eq!(predict_mlp(&m, &[vec![0.0; 3]]).unwrap().len(), 1);
        assert!(matches!(predict_mlp(&m, &[vec![0.0; 2]]), Err(MlpError::Arity { .. })));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(200, 1);
        let m = fit_mlp(&x, &y, 2, &MlpParams::default(), 7).unwrap();
        let pred = predict_mlp(&m, &x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn loss_drops_over_first_epochs() {
        let (x, y) = blobs(60, 2);
        let (_, trace) = fit_mlp_traced(&x, &y, 2, &MlpParams::default(), 3).unwrap();
        assert!(trace[9] < trace[0]);
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, y) = blobs(40, 4);
        let p = MlpParams {
            epochs: 20,
            ..MlpParams::default()
        };
        assert_eq!(fit_mlp(&x, &y, 2, &p, 5).unwrap(), fit_mlp(&x, &y, 2, &p, 5).unwrap());
        assert_ne!(fit_mlp(&x, &y, 2, &p, 5).unwrap(), fit_mlp(&x, &y, 2, &p, 6).unwrap());
    }

    #[test]
    fn input_errors() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(fit_mlp(&x, &[1, 1], 2, &MlpParams::default(), 0), Err(MlpError::SingleClass)));
        assert!(matches!(fit_mlp(&x[..1], &[0], 2, &MlpParams::default(), 0), Err(MlpError::TooFewSamples(1))));
        let bad = vec![vec![0.0], vec![f64::NAN]];
        assert!(matches!(fit_mlp(&bad, &[0, 1], 2, &MlpParams::default(), 0), Err(MlpError::NonFinite { row: 1, col: 0 })));
    }

    #[test]
    fn folding_preserves_predictions() {
        let (x, y) = blobs(50, 8);
        let m = fit_mlp(&x, &y, 2, &MlpParams { epochs: 30, ..MlpParams::default() }, 1).unwrap();
        let f = m.fold_standardization();
        for r in &x {
            let a = m.predict_proba(r).unwrap();
            let b = f.predict_proba(r).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn persistence_round_trip() {
        let (x, y) = blobs(20, 9);
        let m = fit_mlp(&x, &y, 2, &MlpParams { epochs: 5, hidden: 8, ..MlpParams::default() }, 1).unwrap();
        assert_eq!(MlpModel::from_json(&m.to_json()).unwrap(), m);
        let other = m.to_json().replace(MLP_SCHEMA, "tabgen.tree-ensemble/v1");
        assert!(MlpModel::from_json(&other).is_err());
    }

    #[test]
    fn imputation() {
        let mut x = vec![vec![1.0, f64::NAN], vec![3.0, 4.0], vec![f64::NAN, f64::NAN]];
        let means = column_means(&x);
        assert_eq!(means, [2.0, 4.0]);
        impute(&mut x, &means);
        assert_eq!(x, [[1.0, 4.0], [3.0, 4.0], [2.0, 4.0]]);
    }
}
