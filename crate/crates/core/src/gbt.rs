//! Gradient-boosted regression trees under absolute loss.
//!
//! Each round fits a depth-limited tree to the sign of the residuals, then
//! replaces every leaf value with the median residual of its samples.
//! Trees grow level by level over presorted feature columns, so a round
//! costs `O(depth · features · rows)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::median;

#[derive(Debug, Error, PartialEq)]
pub enum GbtError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("row {row} has {got} features, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("invalid hyperparameter: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_trees: 150,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 5,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<(), GbtError> {
        if self.n_trees == 0 {
            return Err(GbtError::Params("n_trees must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbtError::Params("learning_rate must lie in (0, 1]".into()));
        }
        if self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(GbtError::Params("max_depth and min_samples_leaf must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub n_features: usize,
}

impl GbtModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.init + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len().max(1) as f64
}

fn check_rows(x: &[Vec<f64>], y: &[f64]) -> Result<usize, GbtError> {
    let width = x.first().map_or(0, |r| r.len());
    for (row, r) in x.iter().enumerate() {
        if r.len() != width {
            return Err(GbtError::Ragged { row, expected: width, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) || !y[row].is_finite() {
            return Err(GbtError::NonFinite { row });
        }
    }
    Ok(width)
}

#[derive(Clone, Copy, Default)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// One tree on `targets` (the residual signs); leaves take the median of
/// `residuals` over their samples.
fn grow_tree(
    x: &[Vec<f64>],
    sorted: &[Vec<usize>],
    targets: &[f64],
    residuals: &[f64],
    params: &GbtParams,
) -> Tree {
    let n = x.len();
    // Each sample's current node.
    let mut node_of = vec![0usize; n];
    let mut nodes: Vec<Node> = vec![Node::Leaf(0.0)];
    let mut open: Vec<usize> = vec![0];
    for _depth in 0..params.max_depth {
        if open.is_empty() {
            break;
        }
        let mut slot = vec![usize::MAX; nodes.len()];
        for (k, &nd) in open.iter().enumerate() {
            slot[nd] = k;
        }
        let m = open.len();
        let mut total_n = vec![0usize; m];
        let mut total_s = vec![0.0; m];
        for i in 0..n {
            let k = slot[node_of[i]];
            if k != usize::MAX {
                total_n[k] += 1;
                total_s[k] += targets[i];
            }
        }
        let mut best = vec![SplitCandidate::default(); m];
        for (f, order) in sorted.iter().enumerate() {
            let mut left_n = vec![0usize; m];
            let mut left_s = vec![0.0; m];
            let mut prev = vec![f64::NAN; m];
            for &i in order {
                let k = slot[node_of[i]];
                if k == usize::MAX {
                    continue;
                }
                let v = x[i][f];
                if left_n[k] > 0 && v > prev[k] {
                    let (ln, rn) = (left_n[k], total_n[k] - left_n[k]);
                    if ln >= params.min_samples_leaf && rn >= params.min_samples_leaf {
                        let rs = total_s[k] - left_s[k];
                        let gain = left_s[k] * left_s[k] / ln as f64 + rs * rs / rn as f64
                            - total_s[k] * total_s[k] / total_n[k] as f64;
                        if gain > best[k].gain + 1e-12 {
                            best[k] = SplitCandidate {
                                gain,
                                feature: f,
                                threshold: 0.5 * (prev[k] + v),
                            };
                        }
                    }
                }
                left_n[k] += 1;
                left_s[k] += targets[i];
                prev[k] = v;
            }
        }
        let mut next_open = Vec::new();
        let mut children = vec![None; m];
        for (k, &nd) in open.iter().enumerate() {
            if best[k].gain > 0.0 {
                let left = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                nodes[nd] = Node::Split {
                    feature: best[k].feature,
                    threshold: best[k].threshold,
                    left,
                    right: left + 1,
                };
                children[k] = Some((left, best[k].feature, best[k].threshold));
                next_open.push(left);
                next_open.push(left + 1);
            }
        }
        for i in 0..n {
            let k = slot[node_of[i]];
            if k != usize::MAX {
                if let Some((left, f, t)) = children[k] {
                    node_of[i] = if x[i][f] <= t { left } else { left + 1 };
                }
            }
        }
        open = next_open;
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
    for i in 0..n {
        members[node_of[i]].push(residuals[i]);
    }
    for (nd, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf(v) = node {
            *v = if members[nd].is_empty() { 0.0 } else { median(&members[nd]) };
        }
    }
    Tree { nodes }
}

/// Fits the ensemble. Deterministic for given rows and parameters.
pub fn fit(x: &[Vec<f64>], y: &[f64], params: &GbtParams) -> Result<GbtModel, GbtError> {
    params.validate()?;
    if x.len() != y.len() || x.len() < 2 {
        return Err(GbtError::TooFewRows { needed: 2, got: x.len().min(y.len()) });
    }
    let width = check_rows(x, y)?;
    let sorted: Vec<Vec<usize>> = (0..width)
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let init = median(y);
    let mut pred = vec![init; y.len()];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let residuals: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        if residuals.iter().all(|r| *r == 0.0) {
            break;
        }
        let signs: Vec<f64> = residuals
            .iter()
            .map(|r| if *r > 0.0 { 1.0 } else if *r < 0.0 { -1.0 } else { 0.0 })
            .collect();
        let tree = grow_tree(x, &sorted, &signs, &residuals, params);
        for (p, row) in pred.iter_mut().zip(x) {
            *p += params.learning_rate * tree.predict(row);
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        init,
        learning_rate: params.learning_rate,
        trees,
        n_features: width,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub model: GbtModel,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub train_mae: f64,
    pub test_mae: f64,
    /// Test MAE of always predicting the training median.
    pub median_baseline_mae: f64,
    pub constant_target: bool,
}

pub const MIN_REGRESSION_ROWS: usize = 100;

/// Seeded 80/20 split, fit on the larger part, MAE on both.
pub fn fit_with_holdout(x: &[Vec<f64>], y: &[f64], seed: u64, params: &GbtParams) -> Result<RegressionFit, GbtError> {
    if x.len() < MIN_REGRESSION_ROWS || x.len() != y.len() {
        return Err(GbtError::TooFewRows { needed: MIN_REGRESSION_ROWS, got: x.len().min(y.len()) });
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = x.len() / 5;
    let (test_rows, train_rows) = idx.split_at(n_test);
    let mut train_rows = train_rows.to_vec();
    let mut test_rows = test_rows.to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    let pick = |rows: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (rows.iter().map(|&i| x[i].clone()).collect(), rows.iter().map(|&i| y[i]).collect())
    };
    let (xtr, ytr) = pick(&train_rows);
    let (xte, yte) = pick(&test_rows);
    let constant_target = y.iter().all(|v| *v == y[0]);
    if constant_target {
        log::warn!("regression target is constant");
    }
    let model = fit(&xtr, &ytr, params)?;
    let train_mae = mean_absolute_error(&model.predict_all(&xtr), &ytr);
    let test_mae = mean_absolute_error(&model.predict_all(&xte), &yte);
    let m = median(&ytr);
    let median_baseline_mae = mean_absolute_error(&vec![m; yte.len()], &yte);
    Ok(RegressionFit {
        model,
        train_rows,
        test_rows,
        train_mae,
        test_mae,
        median_baseline_mae,
        constant_target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub group: String,
    /// Mean MAE increase, floored at zero.
    pub raw: f64,
    pub normalized: f64,
}

/// Mean increase in MAE when each group's columns are permuted together,
/// over `repeats` seeded shuffles. Normalized to sum to one.
pub fn permutation_importance(
    model: &GbtModel,
    x: &[Vec<f64>],
    y: &[f64],
    groups: &[(String, Vec<usize>)],
    repeats: usize,
    seed: u64,
) -> Vec<GroupImportance> {
    let base = mean_absolute_error(&model.predict_all(x), y);
    let repeats = repeats.max(1);
    let raw: Vec<f64> = groups
        .par_iter()
        .enumerate()
        .map(|(g, (_, cols))| {
            let total: f64 = (0..repeats)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((g as u64) << 32) | r as u64);
                    let mut perm: Vec<usize> = (0..x.len()).collect();
                    perm.shuffle(&mut rng);
                    let mut row = vec![0.0; model.n_features];
                    let mut err = 0.0;
                    for (i, src) in perm.iter().enumerate() {
                        row.copy_from_slice(&x[i]);
                        for &c in cols {
                            row[c] = x[*src][c];
                        }
                        err += (model.predict(&row) - y[i]).abs();
                    }
                    err / x.len().max(1) as f64 - base
                })
                .sum();
            (total / repeats as f64).max(0.0)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    groups
        .iter()
        .zip(raw)
        .map(|((name, _), r)| GroupImportance {
            group: name.clone(),
            raw: r,
            normalized: if sum > 0.0 { r / sum } else { 0.0 },
        })
        .collect()
}
