//! Lloyd's k-means with distance-squared-weighted seeding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClusterLabel, DiscoverError};

const MAX_ITERATIONS: usize = 300;
const SHIFT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<ClusterLabel>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Seeding by sampling points with probability proportional to squared
/// distance from the nearest already-chosen centroid.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            rng.gen_range(0..n)
        };
        centroids.push(points[chosen].clone());
        for (i, point) in points.iter().enumerate() {
            let d = squared_distance(point, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Cluster `points` into exactly `k` non-empty clusters. An emptied cluster
/// is reseeded at the point farthest from its assigned centroid.
pub fn cluster_kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<KmeansResult, DiscoverError> {
    let n = points.len();
    if k == 0 {
        return Err(DiscoverError::InvalidConfig("k must be >= 1".to_string()));
    }
    if n < k {
        return Err(DiscoverError::TooFewPoints { have: n, need: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let dims = points[0].len();
    let mut labels = vec![0usize; n];
    let mut iterations = 0usize;

    for iteration in 0..MAX_ITERATIONS {
        iterations = iteration + 1;
        for (i, point) in points.iter().enumerate() {
            labels[i] = nearest_centroid(point, &centroids).0;
        }

        // Reseed empty clusters at the worst-fitting point.
        loop {
            let mut counts = vec![0usize; k];
            for label in &labels {
                counts[*label] += 1;
            }
            let Some(empty) = counts.iter().position(|c| *c == 0) else {
                break;
            };
            let (farthest, _) = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, squared_distance(p, &centroids[labels[i]])))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap();
            centroids[empty] = points[farthest].clone();
            labels[farthest] = empty;
        }

        let mut sums = vec![vec![0.0f64; dims]; k];
        let mut counts = vec![0usize; k];
        for (i, point) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(point) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            for v in sums[c].iter_mut() {
                *v /= counts[c] as f64;
            }
            shift = shift.max(squared_distance(&sums[c], &centroids[c]).sqrt());
            centroids[c] = sums[c].clone();
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }

    for (i, point) in points.iter().enumerate() {
        labels[i] = nearest_centroid(point, &centroids).0;
    }
    let inertia: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| squared_distance(p, &centroids[labels[i]]))
        .sum();
    Ok(KmeansResult {
        labels: labels.into_iter().map(ClusterLabel::Cluster).collect(),
        centroids,
        inertia,
        iterations,
    })
}
