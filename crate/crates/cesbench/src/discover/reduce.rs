//! Neighbor-graph dimensionality reduction.
//!
//! The classic recipe: exact k-nearest-neighbor graph, per-point bandwidth
//! calibration (binary search so the smoothed neighbor weights sum to
//! log2(k)), probabilistic-union symmetrization, then stochastic gradient
//! descent on a low-dimensional layout with attractive updates along graph
//! edges and repulsive updates against negative samples. Single-threaded
//! and fully determined by the config seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DiscoverError;
use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub n_neighbors: usize,
    pub output_dims: usize,
    pub metric: DistanceMetric,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_epochs() -> usize {
    300
}

impl Default for ReductionConfig {
    /// 15 neighbors, 20 output dimensions, cosine distance.
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            output_dims: 20,
            metric: DistanceMetric::Cosine,
            seed: 42,
            epochs: default_epochs(),
        }
    }
}

// Curve parameters of 1/(1 + a*d^(2b)) for min_dist 0.1, spread 1.0.
const CURVE_A: f64 = 1.577;
const CURVE_B: f64 = 0.8951;
const NEGATIVE_SAMPLE_RATE: f64 = 5.0;
const MOVE_CLIP: f64 = 4.0;

fn distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        DistanceMetric::Cosine => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return 1.0;
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        }
    }
}

struct Edge {
    a: usize,
    b: usize,
    weight: f64,
}

/// Per-point bandwidth so that sum_j exp(-(d_j - rho)/sigma) = log2(k).
fn smooth_knn_sigma(dists: &[f64], rho: f64, k: usize) -> f64 {
    let target = (k as f64).log2();
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut mid = 1.0f64;
    for _ in 0..64 {
        let sum: f64 = dists
            .iter()
            .map(|d| (-((d - rho).max(0.0)) / mid).exp())
            .sum();
        if (sum - target).abs() < 1e-5 {
            break;
        }
        if sum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    mid.max(1e-12)
}

/// Project embeddings into `output_dims` dimensions, one output per input in
/// the same order. Deterministic per seed.
pub fn reduce_dimensions(
    vectors: &[EmbeddingVector],
    config: &ReductionConfig,
) -> Result<Vec<Vec<f64>>, DiscoverError> {
    let n = vectors.len();
    if config.n_neighbors < 2 {
        return Err(DiscoverError::InvalidConfig(
            "n_neighbors must be >= 2".to_string(),
        ));
    }
    if n <= config.n_neighbors {
        return Err(DiscoverError::TooFewPoints {
            have: n,
            need: config.n_neighbors + 1,
        });
    }
    let input_dims = vectors[0].dims;
    for v in vectors {
        if v.dims != input_dims {
            return Err(DiscoverError::InvalidConfig(format!(
                "mixed input dims: {} vs {}",
                input_dims, v.dims
            )));
        }
    }
    if config.output_dims >= input_dims {
        return Err(DiscoverError::InvalidConfig(format!(
            "output_dims {} must be below input dims {}",
            config.output_dims, input_dims
        )));
    }
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    if points.iter().all(|p| *p == points[0]) {
        return Err(DiscoverError::DegenerateInput);
    }

    // Exact kNN, ties broken by index.
    let k = config.n_neighbors;
    let mut neighbor_ids = vec![vec![0usize; k]; n];
    let mut neighbor_dists = vec![vec![0f64; k]; n];
    for i in 0..n {
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|j| *j != i)
            .map(|j| (distance(points[i], points[j], config.metric), j))
            .collect();
        candidates
            .sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        for (slot, (d, j)) in candidates.into_iter().take(k).enumerate() {
            neighbor_ids[i][slot] = j;
            neighbor_dists[i][slot] = d;
        }
    }

    // Directed membership weights.
    let mut directed = vec![vec![0f64; k]; n];
    for i in 0..n {
        let rho = neighbor_dists[i][0];
        let sigma = smooth_knn_sigma(&neighbor_dists[i], rho, k);
        for slot in 0..k {
            directed[i][slot] = (-((neighbor_dists[i][slot] - rho).max(0.0)) / sigma).exp();
        }
    }

    // Symmetrize: w = a + b - a*b over the union of directed edges.
    let mut weight_of: std::collections::HashMap<(usize, usize), f64> =
        std::collections::HashMap::new();
    for i in 0..n {
        for slot in 0..k {
            let j = neighbor_ids[i][slot];
            let key = (i.min(j), i.max(j));
            let forward = directed[i][slot];
            let entry = weight_of.entry(key).or_insert(0.0);
            // Combine incrementally; applying the t-conorm twice over the
            // two directions equals a + b - a*b.
            *entry = *entry + forward - *entry * forward;
        }
    }
    let mut edges: Vec<Edge> = weight_of
        .into_iter()
        .map(|((a, b), weight)| Edge { a, b, weight })
        .collect();
    edges.sort_by(|x, y| (x.a, x.b).cmp(&(y.a, y.b)));
    let max_weight = edges.iter().map(|e| e.weight).fold(f64::MIN, f64::max);

    // Seeded random layout in [-10, 10].
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.output_dims;
    let mut layout: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.gen_range(-10.0..10.0)).collect())
        .collect();

    // Edge sampling schedule proportional to weight.
    let epochs = config.epochs.max(1) as f64;
    let epochs_per_sample: Vec<f64> = edges
        .iter()
        .map(|e| {
            if e.weight <= 0.0 {
                f64::INFINITY
            } else {
                max_weight / e.weight
            }
        })
        .collect();
    let mut next_sample: Vec<f64> = epochs_per_sample.clone();
    let epochs_per_negative: Vec<f64> = epochs_per_sample
        .iter()
        .map(|e| e / NEGATIVE_SAMPLE_RATE)
        .collect();
    let mut next_negative: Vec<f64> = epochs_per_negative.clone();

    let clip = |v: f64| v.clamp(-MOVE_CLIP, MOVE_CLIP);
    for epoch in 1..=(config.epochs.max(1)) {
        let alpha = 1.0 * (1.0 - (epoch as f64 - 1.0) / epochs);
        for (e, edge) in edges.iter().enumerate() {
            if next_sample[e] > epoch as f64 {
                continue;
            }
            let (i, j) = (edge.a, edge.b);

            // Attraction along the edge.
            let d2: f64 = (0..m)
                .map(|d| (layout[i][d] - layout[j][d]).powi(2))
                .sum();
            if d2 > 0.0 {
                let coeff = (-2.0 * CURVE_A * CURVE_B * d2.powf(CURVE_B - 1.0))
                    / (1.0 + CURVE_A * d2.powf(CURVE_B));
                for d in 0..m {
                    let delta = clip(coeff * (layout[i][d] - layout[j][d])) * alpha;
                    layout[i][d] += delta;
                    layout[j][d] -= delta;
                }
            }
            next_sample[e] += epochs_per_sample[e];

            // Repulsion against random points.
            let n_neg = ((epoch as f64 - next_negative[e]) / epochs_per_negative[e])
               .max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.gen_range(0..n);
                if other == i {
                    continue;
                }
                let d2: f64 = (0..m)
                    .map(|d| (layout[i][d] - layout[other][d]).powi(2))
                    .sum();
                if d2 > 0.0 {
                    let coeff =
                        (2.0 * CURVE_B) / ((0.001 + d2) * (1.0 + CURVE_A * d2.powf(CURVE_B)));
                    for d in 0..m {
                        let delta = clip(coeff * (layout[i][d] - layout[other][d])) * alpha;
                        layout[i][d] += delta;
                    }
                } else {
                    // Exact overlap with a non-neighbor: push apart.
                    for slot in layout[i].iter_mut() {
                        *slot += MOVE_CLIP * alpha;
                        break;
                    }
                }
            }
            next_negative[e] += n_neg as f64 * epochs_per_negative[e];
        }
    }
    Ok(layout)
}
