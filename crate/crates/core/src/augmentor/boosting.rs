//! Multi-class gradient boosting with a softmax objective.
//!
//! Each round fits one regression tree per class on the Newton direction of
//! the softmax log-loss. Trees are grown level-wise with exact greedy splits
//! over presorted feature columns, so a level costs `O(rows * features)`
//! regardless of how many nodes it holds.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian mass in each child of a split. Children are never
    /// empty, so 0 allows single-row leaves.
    pub min_child_weight: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            rounds: 100,
            max_depth: 6,
            learning_rate: 0.3,
            lambda: 1.0,
            min_child_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left; everything else,
    /// including NaN, goes right.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

/// Raw (uncalibrated) boosted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Booster {
    pub n_classes: usize,
    pub n_features: usize,
    pub learning_rate: f64,
    /// Round-major: tree `r * n_classes + c` belongs to class `c`.
    pub trees: Vec<RegressionTree>,
}

impl Booster {
    pub fn rounds(&self) -> usize {
        self.trees.len() / self.n_classes.max(1)
    }

    pub fn margins(&self, x: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.n_classes];
        for (i, t) in self.trees.iter().enumerate() {
            m[i % self.n_classes] += t.predict(x);
        }
        m
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.margins(x))
    }
}

pub fn softmax(m: &[f64]) -> Vec<f64> {
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = m.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean negative log-likelihood of the true classes.
pub fn log_loss(margins: &[Vec<f64>], y: &[usize]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(y)
        .map(|(m, &c)| {
            let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - m[c]
        })
        .sum();
    total / y.len() as f64
}

fn presort(x: &[Vec<f64>], n_features: usize) -> Vec<Vec<u32>> {
    (0..n_features)
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.len() as u32).collect();
            // NaN sorts last so it never sits between two split candidates.
            idx.sort_by(|&a, &b| {
                let (va, vb) = (x[a as usize][f], x[b as usize][f]);
                match (va.is_nan(), vb.is_nan()) {
                    (false, false) => va.total_cmp(&vb),
                    (a_nan, b_nan) => a_nan.cmp(&b_nan),
                }
            });
            idx
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Clone, Copy, Default)]
struct Scan {
    gl: f64,
    hl: f64,
    last: f64,
    seen: bool,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

/// Grows one tree on gradients `g` and hessians `h`. Returns the tree
/// (leaf values already scaled by the learning rate) and each row's output.
fn grow_tree(
    x: &[Vec<f64>],
    sorted: &[Vec<u32>],
    g: &[f64],
    h: &[f64],
    params: &BoostParams,
) -> (RegressionTree, Vec<f64>) {
    let n = g.len();
    let lambda = params.lambda;
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stats = vec![(g.iter().sum::<f64>(), h.iter().sum::<f64>())];
    let mut node_of = vec![0usize; n];
    let mut open = vec![0usize];

    for _depth in 0..params.max_depth {
        if open.is_empty() {
            break;
        }
        let mut slot_of = vec![usize::MAX; nodes.len()];
        for (s, &nid) in open.iter().enumerate() {
            slot_of[nid] = s;
        }
        let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
        for (f, order) in sorted.iter().enumerate() {
            let mut scan = vec![Scan::default(); open.len()];
            for &r in order {
                let r = r as usize;
                let nid = node_of[r];
                let s = slot_of[nid];
                if s == usize::MAX {
                    continue;
                }
                let v = x[r][f];
                if v.is_nan() {
                    continue;
                }
                let a = &mut scan[s];
                if a.seen && v > a.last {
                    let (gt, ht) = stats[nid];
                    let (gr, hr) = (gt - a.gl, ht - a.hl);
                    if a.hl >= params.min_child_weight && hr >= params.min_child_weight {
                        let gain = score(a.gl, a.hl, lambda) + score(gr, hr, lambda)
                            - score(gt, ht, lambda);
                        if best[s].is_none_or(|b| gain > b.gain) {
                            let mut threshold = a.last + (v - a.last) / 2.0;
                            if threshold <= a.last {
                                threshold = v;
                            }
                            best[s] = Some(Candidate {
                                gain,
                                feature: f,
                                threshold,
                            });
                        }
                    }
                }
                a.gl += g[r];
                a.hl += h[r];
                a.last = v;
                a.seen = true;
            }
        }

        let mut next = Vec::new();
        for (s, &nid) in open.iter().enumerate() {
            let Some(c) = best[s] else { continue };
            let parent = score(stats[nid].0, stats[nid].1, lambda);
            // Zero-gain splits are kept: a balanced XOR has no first split
            // with positive gain, but its children do.
            if c.gain < -1e-9 * (1.0 + parent) {
                continue;
            }
            let left = nodes.len();
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            stats.push((0.0, 0.0));
            stats.push((0.0, 0.0));
            nodes[nid] = Node::Split {
                feature: c.feature,
                threshold: c.threshold,
                left,
                right: left + 1,
            };
            next.push(left);
            next.push(left + 1);
        }
        for r in 0..n {
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = nodes[node_of[r]]
            {
                let child = if x[r][feature] < threshold { left } else { right };
                node_of[r] = child;
                stats[child].0 += g[r];
                stats[child].1 += h[r];
            }
        }
        open = next;
    }

    for (node, &(gs, hs)) in nodes.iter_mut().zip(&stats) {
        if let Node::Leaf { value } = node {
            *value = -params.learning_rate * gs / (hs + lambda);
        }
    }
    let out = node_of
        .iter()
        .map(|&nid| match nodes[nid] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("rows always rest on leaves"),
        })
        .collect();
    (RegressionTree { nodes }, out)
}

/// Fits the booster and records the training log-loss before the first
/// round and after every round.
pub fn fit_booster_traced(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &BoostParams,
) -> (Booster, Vec<f64>) {
    let n = x.len();
    let n_features = x.first().map_or(0, Vec::len);
    let sorted = presort(x, n_features);
    let mut margins = vec![vec![0.0; n_classes]; n];
    let mut trees = Vec::with_capacity(params.rounds * n_classes);
    let mut trace = vec![log_loss(&margins, y)];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];

    for _ in 0..params.rounds {
        let probs: Vec<Vec<f64>> = margins.iter().map(|m| softmax(m)).collect();
        let mut deltas = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            for i in 0..n {
                let p = probs[i][c];
                g[i] = p - if y[i] == c { 1.0 } else { 0.0 };
                // 2p(1-p) bounds the softmax hessian from above, so each
                // shrunken Newton step cannot increase the loss.
                h[i] = (2.0 * p * (1.0 - p)).max(1e-16);
            }
            let (tree, out) = grow_tree(x, &sorted, &g, &h, params);
            trees.push(tree);
            deltas.push(out);
        }
        for (i, m) in margins.iter_mut().enumerate() {
            for (c, d) in deltas.iter().enumerate() {
                m[c] += d[i];
            }
        }
        trace.push(log_loss(&margins, y));
    }

    (
        Booster {
            n_classes,
            n_features,
            learning_rate: params.learning_rate,
            trees,
        },
        trace,
    )
}

pub fn fit_booster(x: &[Vec<f64>], y: &[usize], n_classes: usize, params: &BoostParams) -> Booster {
    fit_booster_traced(x, y, n_classes, params).0
}
