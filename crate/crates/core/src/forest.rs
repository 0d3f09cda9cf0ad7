//! A small bagged-tree classifier.
//!
//! Binary classification with an ensemble of depth-limited CART trees
//! (Gini impurity, exhaustive axis-aligned splits) over bootstrap
//! resamples. This exists so permutation-importance analyses need no
//! external ML dependency; it is deliberately plain — no feature
//! subsampling, no pruning — and fully deterministic: each tree's
//! bootstrap draws from its own derived RNG stream, split search scans
//! features and thresholds in ascending order keeping the first best, and
//! vote ties resolve to the negative class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{self, domain};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyData,
    #[error("shape mismatch: {message}")]
    ShapeMismatch { message: String },
    #[error("non-finite feature value in row {row}")]
    NonFinite { row: usize },
    #[error("invalid forest config: {message}")]
    InvalidConfig { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 50,
            max_depth: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        class: bool,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    root: Node,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> bool {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    trees: Vec<Tree>,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Best axis-aligned split of the node's samples, or `None` when no split
/// strictly improves the weighted impurity.
fn best_split(x: &[Vec<f64>], y: &[bool], idx: &[usize]) -> Option<(usize, f64)> {
    let n = idx.len();
    let pos: usize = idx.iter().filter(|&&i| y[i]).count();
    if n < 2 || pos == 0 || pos == n {
        return None;
    }
    let parent = gini(pos, n);
    let dim = x[idx[0]].len();
    let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, impurity)
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n);
    #[allow(clippy::needless_range_loop)]
    // `feature` also indexes jagged x[i][feature] and is stored in `best`
    for feature in 0..dim {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (x[i][feature], y[i])));
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        let mut left_pos = 0usize;
        for i in 1..n {
            if pairs[i - 1].1 {
                left_pos += 1;
            }
            if pairs[i - 1].0 == pairs[i].0 {
                continue;
            }
            let right_pos = pos - left_pos;
            let impurity =
                (i as f64 * gini(left_pos, i) + (n - i) as f64 * gini(right_pos, n - i)) / n as f64;
            if impurity < parent - 1e-12 && best.is_none_or(|(_, _, b)| impurity < b - 1e-12) {
                best = Some((feature, 0.5 * (pairs[i - 1].0 + pairs[i].0), impurity));
            }
        }
    }
    best.map(|(f, t, _)| (f, t))
}

fn majority(y: &[bool], idx: &[usize]) -> bool {
    let pos = idx.iter().filter(|&&i| y[i]).count();
    2 * pos > idx.len()
}

fn build(x: &[Vec<f64>], y: &[bool], idx: &[usize], depth_left: usize) -> Node {
    if depth_left == 0 {
        return Node::Leaf {
            class: majority(y, idx),
        };
    }
    match best_split(x, y, idx) {
        None => Node::Leaf {
            class: majority(y, idx),
        },
        Some((feature, threshold)) => {
            let (left, right): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| x[i][feature] <= threshold);
            Node::Split {
                feature,
                threshold,
                left: Box::new(build(x, y, &left, depth_left - 1)),
                right: Box::new(build(x, y, &right, depth_left - 1)),
            }
        }
    }
}

pub fn fit_forest(x: &[Vec<f64>], y: &[bool], cfg: &ForestConfig) -> Result<Forest, ForestError> {
    if cfg.trees == 0 || cfg.max_depth == 0 {
        return Err(ForestError::InvalidConfig {
            message: format!(
                "trees {} and max_depth {} must be positive",
                cfg.trees, cfg.max_depth
            ),
        });
    }
    if x.is_empty() {
        return Err(ForestError::EmptyData);
    }
    if x.len() != y.len() {
        return Err(ForestError::ShapeMismatch {
            message: format!("{} rows vs {} labels", x.len(), y.len()),
        });
    }
    let dim = x[0].len();
    if dim == 0 {
        return Err(ForestError::ShapeMismatch {
            message: "rows have no features".into(),
        });
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != dim {
            return Err(ForestError::ShapeMismatch {
                message: format!("row {i} has {} features, expected {dim}", row.len()),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite { row: i });
        }
    }

    let n = x.len();
    let trees: Vec<Tree> = (0..cfg.trees)
        .into_par_iter()
        .map(|t| {
            use rand::Rng;
            let mut rng = seeds::stream_rng(cfg.seed, domain::FOREST_TREE, t as u64);
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            Tree {
                root: build(x, y, &sample, cfg.max_depth),
            }
        })
        .collect();
    Ok(Forest {
        config: *cfg,
        trees,
    })
}

impl Forest {
    /// Majority vote over trees; exact ties go to `false`.
    pub fn predict(&self, row: &[f64]) -> bool {
        let votes = self.trees.iter().filter(|t| t.predict(row)).count();
        2 * votes > self.trees.len()
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let correct = x
            .iter()
            .zip(y.iter())
            .filter(|(row, label)| self.predict(row) == **label)
            .count();
        correct as f64 / x.len() as f64
    }
}
