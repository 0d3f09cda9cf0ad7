//! Seeded k-means with k-means++ initialization and best-of-restarts Lloyd
//! iterations.
//!
//! Determinism contract: for a fixed `(points, config)` the result is
//! bit-identical regardless of how many rayon workers execute it. Restarts
//! and per-point assignments run in parallel, but every floating-point
//! reduction (centroid sums, objectives) is performed in a fixed sequential
//! order.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::seeds::{self, domain};

#[derive(Debug, Error)]
pub enum KMeansError {
    #[error("too few distinct points: {distinct} distinct, need at least k = {need}")]
    TooFewPoints { distinct: usize, need: usize },
    #[error("invalid k-means config: {message}")]
    InvalidConfig { message: String },
    #[error("point {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("point {index} component {component} is not finite")]
    NonFiniteInput { index: usize, component: usize },
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    /// Lloyd iteration cap per restart.
    pub max_iter: usize,
    /// Independent seeded restarts; the lowest-objective run wins,
    /// ties broken by the lowest restart index.
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 300,
            restarts: 32,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// `k` centroids in input space, labeled 1-based by downstream callers.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of every point to its nearest centroid.
    pub objective: f64,
    /// Lloyd iterations executed by the winning restart.
    pub iterations: usize,
    /// Whether assignments stabilized before `max_iter`.
    pub converged: bool,
    /// Objective after each Lloyd iteration of the winning restart.
    pub objective_history: Vec<f64>,
}

/// Index of the nearest centroid (0-based), ties to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d2 = sq_dist(c, x);
        if d2 < best_d2 {
            best_d2 = d2;
            best = j;
        }
    }
    best
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (u, v) in a.iter().zip(b.iter()) {
        let d = u - v;
        s += d * d;
    }
    s
}

fn validate(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<usize, KMeansError> {
    if cfg.k == 0 || cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(KMeansError::InvalidConfig {
            message: format!(
                "k={}, restarts={}, max_iter={} must all be positive",
                cfg.k, cfg.restarts, cfg.max_iter
            ),
        });
    }
    let dim = match points.first() {
        Some(p) => p.len(),
        None => {
            return Err(KMeansError::TooFewPoints {
                distinct: 0,
                need: cfg.k,
            })
        }
    };
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(KMeansError::DimensionMismatch {
                index: i,
                got: p.len(),
                expected: dim,
            });
        }
        if let Some(c) = p.iter().position(|v| !v.is_finite()) {
            return Err(KMeansError::NonFiniteInput {
                index: i,
                component: c,
            });
        }
    }
    // Distinct points, compared bit-exactly.
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let distinct = keys.len();
    if distinct < cfg.k {
        return Err(KMeansError::TooFewPoints {
            distinct,
            need: cfg.k,
        });
    }
    Ok(dim)
}

/// Fit k-means. Parallel over restarts and point assignments; deterministic
/// per seed (see module docs).
pub fn fit(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansFit, KMeansError> {
    let dim = validate(points, cfg)?;
    let runs: Vec<KMeansFit> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_once(points, dim, cfg, r as u64))
        .collect();
    // Lowest objective wins; strict `<` keeps the lowest restart index on
    // ties, independent of scheduling because `runs` is index-ordered.
    let mut best = 0usize;
    for (i, run) in runs.iter().enumerate() {
        if run.objective < runs[best].objective {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

fn run_once(points: &[Vec<f64>], dim: usize, cfg: &KMeansConfig, restart: u64) -> KMeansFit {
    let mut rng = seeds::stream_rng(cfg.seed, domain::KMEANS_RESTART, restart);
    let mut centroids = plus_plus_init(points, cfg.k, &mut rng);
    let mut assignment: Vec<u32> = vec![u32::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;

    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        // Assignment step: independent per point, safe to parallelize.
        let new_assignment: Vec<u32> = points
            .par_iter()
            .map(|p| nearest(&centroids, p) as u32)
            .collect();
        let changed = new_assignment != assignment;
        assignment = new_assignment;

        // Update step: sequential accumulation in point order so the sums do
        // not depend on scheduling.
        let mut sums = vec![vec![0.0f64; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &a) in points.iter().zip(assignment.iter()) {
            let a = a as usize;
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..cfg.k {
            if counts[j] > 0 {
                for s in sums[j].iter_mut() {
                    *s /= counts[j] as f64;
                }
                centroids[j] = std::mem::take(&mut sums[j]);
            } else {
                // Empty cluster: reseed at the point farthest from its
                // centroid (ties to the lowest point index).
                let far = farthest_point(points, &centroids, &assignment);
                centroids[j] = points[far].clone();
            }
        }

        let objective = objective_of(points, &centroids);
        if let Some(prev) = history.last().copied() {
            // Lloyd never increases the objective; allow only rounding slack.
            debug_assert!(
                objective <= prev * (1.0 + 1e-12) + 1e-9,
                "objective increased: {prev} -> {objective}"
            );
        }
        history.push(objective);

        if !changed {
            converged = true;
            break;
        }
    }

    KMeansFit {
        objective: *history.last().expect("at least one iteration"),
        centroids,
        iterations,
        converged,
        objective_history: history,
    }
}

fn farthest_point(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[u32]) -> usize {
    let mut best = 0usize;
    let mut best_d2 = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d2 = sq_dist(p, &centroids[assignment[i] as usize]);
        if d2 > best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    best
}

fn objective_of(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    // Per-point minima in parallel, then a sequential sum for determinism.
    let d2: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let j = nearest(centroids, p);
            sq_dist(&centroids[j], p)
        })
        .collect();
    d2.iter().sum()
}

/// k-means++ seeding: first centroid uniform, then D^2-weighted draws.
fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        debug_assert!(total > 0.0, "guarded by the distinct-points precondition");
        let mut u = rng.random::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if u < w {
                chosen = i;
                break;
            }
            u -= w;
        }
        let c = points[chosen].clone();
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}
