//! Bagged regression trees over binary descriptors.
//!
//! Trees split greedily on the variance-reduction criterion, evaluating every
//! feature at every node. With 0/1 features the only useful cut is 0.5, so
//! instances with `x[f] = 0` go left and `x[f] = 1` go right.

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::stats;

pub const BINARY_THRESHOLD: f64 = 0.5;

/// A split must remove more than this fraction of the node's squared error.
pub const MIN_RELATIVE_GAIN: f64 = 1e-10;
/// Candidate splits whose SSE differs by at most this fraction of the
/// parent SSE are ties. Complementary features produce the same partition
/// with sums accumulated in a different order, so exact comparison would
/// let rounding pick the winner.
pub const TIE_RELATIVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("cannot fit on an empty training set")]
    Empty,
    #[error("{rows} rows but {targets} targets")]
    Length { rows: usize, targets: usize },
    #[error("row has {found} features, expected {expected}")]
    Width { expected: usize, found: usize },
    #[error("{n} training instances cannot fill {k} folds")]
    TooFewForFolds { n: usize, k: usize },
    #[error("forest needs at least one tree")]
    NoTrees,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    /// Visit every internal node as `(feature, threshold)`.
    pub fn for_each_split(&self, f: &mut impl FnMut(usize, f64)) {
        if let TreeNode::Split { feature, threshold, left, right } = self {
            f(*feature, *threshold);
            left.for_each_split(f);
            right.for_each_split(f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until the stopping rules fire.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: None, min_samples_split: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub tree: TreeParams,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, bootstrap: true, tree: TreeParams::default() }
    }
}

/// Fit one regression tree on all rows.
pub fn fit_tree(x: &[&[f64]], y: &[f64], params: &TreeParams) -> Result<TreeNode, ForestError> {
    check_xy(x, y)?;
    let idx: Vec<usize> = (0..x.len()).collect();
    Ok(grow(x, y, &idx, 0, params))
}

fn check_xy(x: &[&[f64]], y: &[f64]) -> Result<usize, ForestError> {
    if x.is_empty() {
        return Err(ForestError::Empty);
    }
    if x.len() != y.len() {
        return Err(ForestError::Length { rows: x.len(), targets: y.len() });
    }
    let d = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(ForestError::Width { expected: d, found: r.len() });
    }
    Ok(d)
}

fn grow(x: &[&[f64]], y: &[f64], idx: &[usize], depth: usize, params: &TreeParams) -> TreeNode {
    let n = idx.len();
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let leaf = TreeNode::Leaf { value: mean };
    if n < params.min_samples_split.max(2) || params.max_depth.is_some_and(|m| depth >= m) {
        return leaf;
    }
    let first = y[idx[0]];
    if idx.iter().all(|&i| y[i] == first) {
        return leaf;
    }

    // Sums of mean-centred targets keep the squared-error algebra well conditioned.
    let centred: Vec<f64> = idx.iter().map(|&i| y[i] - mean).collect();
    let total_s: f64 = centred.iter().sum();
    let total_q: f64 = centred.iter().map(|c| c * c).sum();
    let parent_sse = total_q - total_s * total_s / n as f64;

    let d = x[idx[0]].len();
    let mut best: Option<(usize, f64)> = None;
    for f in 0..d {
        let (mut nl, mut sl, mut ql) = (0usize, 0.0, 0.0);
        for (&i, &c) in idx.iter().zip(&centred) {
            if x[i][f] < BINARY_THRESHOLD {
                nl += 1;
                sl += c;
                ql += c * c;
            }
        }
        let nr = n - nl;
        if nl == 0 || nr == 0 {
            continue;
        }
        let (sr, qr) = (total_s - sl, total_q - ql);
        let sse = (ql - sl * sl / nl as f64) + (qr - sr * sr / nr as f64);
        // lowest feature index wins ties
        if best.is_none_or(|(_, b)| sse < b - TIE_RELATIVE_TOLERANCE * parent_sse) {
            best = Some((f, sse));
        }
    }
    let Some((feature, sse)) = best else { return leaf };
    if parent_sse - sse <= MIN_RELATIVE_GAIN * parent_sse {
        return leaf;
    }
    let (left, right): (Vec<usize>, Vec<usize>) =
        idx.iter().partition(|&&i| x[i][feature] < BINARY_THRESHOLD);
    TreeNode::Split {
        feature,
        threshold: BINARY_THRESHOLD,
        left: Box::new(grow(x, y, &left, depth + 1, params)),
        right: Box::new(grow(x, y, &right, depth + 1, params)),
    }
}

/// `n` draws with replacement from `0..n`.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub seed: u64,
    pub config: ForestConfig,
    pub bootstrap_seeds: Vec<u64>,
    pub trees: Vec<TreeNode>,
}

impl Forest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Fit `config.n_trees` trees, each on its own bootstrap resample.
pub fn fit_forest(
    x: &[&[f64]],
    y: &[f64],
    config: &ForestConfig,
    seed: u64,
) -> Result<Forest, ForestError> {
    let d = check_xy(x, y)?;
    if config.n_trees == 0 {
        return Err(ForestError::NoTrees);
    }
    let seeds: Vec<u64> = (0..config.n_trees)
        .map(|t| seed::derive_path(seed, &[seed::stream::BOOTSTRAP, t as u64]))
        .collect();
    let trees = seeds
        .par_iter()
        .map(|&s| {
            if config.bootstrap {
                let sample = bootstrap_indices(x.len(), s);
                let bx: Vec<&[f64]> = sample.iter().map(|&i| x[i]).collect();
                let by: Vec<f64> = sample.iter().map(|&i| y[i]).collect();
                let idx: Vec<usize> = (0..bx.len()).collect();
                grow(&bx, &by, &idx, 0, &config.tree)
            } else {
                let idx: Vec<usize> = (0..x.len()).collect();
                grow(x, y, &idx, 0, &config.tree)
            }
        })
        .collect();
    Ok(Forest { n_features: d, seed, config: *config, bootstrap_seeds: seeds, trees })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestPrediction {
    pub mean: f64,
    /// Population standard deviation over trees.
    pub std: f64,
    pub per_tree: Vec<f64>,
}

pub fn predict_forest(forest: &Forest, x: &[f64]) -> Result<ForestPrediction, ForestError> {
    if x.len() != forest.n_features {
        return Err(ForestError::Width { expected: forest.n_features, found: x.len() });
    }
    let per_tree: Vec<f64> = forest.trees.iter().map(|t| t.predict(x)).collect();
    Ok(ForestPrediction { mean: stats::mean(&per_tree), std: stats::population_std(&per_tree), per_tree })
}

/// Seeded shuffle of `train_idx` cut into `k` contiguous folds whose sizes
/// differ by at most one (larger folds first).
pub fn kfold_partition(train_idx: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, ForestError> {
    let n = train_idx.len();
    if k == 0 || n < k {
        return Err(ForestError::TooFewForFolds { n, k });
    }
    let mut order = train_idx.to_vec();
    order.shuffle(&mut seed::rng(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}
