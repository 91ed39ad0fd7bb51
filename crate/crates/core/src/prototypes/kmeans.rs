//! Seeded spherical k-means over L2-normalized patch features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Stop once the largest centroid move, relative to the centroid norm,
    /// drops below this.
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iterations: 25, tolerance: 1e-4 }
    }
}

pub(crate) struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
}

pub(crate) fn normalize(row: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        v
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid. Ties go to `prefer` when given, otherwise
/// to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>], prefer: Option<usize>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    if let Some(p) = prefer {
        if sq_dist(point, &centroids[p]) <= best_d {
            return p;
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn counts(assignment: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &a in assignment {
        c[a] += 1;
    }
    c
}

/// Moves the point farthest from its centroid (taken from a cluster with
/// more than one member) into each empty cluster.
fn reseed_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignment: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut changed = false;
    loop {
        let sizes = counts(assignment, k);
        let Some(empty) = sizes.iter().position(|&n| n == 0) else {
            return changed;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centroids[assignment[a]])
                    .total_cmp(&sq_dist(&points[b], &centroids[assignment[b]]))
                    .then(b.cmp(&a))
            })
            .expect("k <= number of points guarantees a cluster with spare members");
        centroids[empty] = points[far].clone();
        assignment[far] = empty;
        changed = true;
    }
}

fn update_centroids(points: &[Vec<f64>], assignment: &[usize], centroids: &mut [Vec<f64>]) -> f64 {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(assignment) {
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut max_shift: f64 = 0.0;
    for (c, sum) in sums.into_iter().enumerate() {
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let updated: Vec<f64> = sum.into_iter().map(|x| x / norm).collect();
        let old_norm = centroids[c].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        max_shift = max_shift.max(sq_dist(&updated, &centroids[c]).sqrt() / old_norm);
        centroids[c] = updated;
    }
    max_shift
}

/// Runs spherical k-means. Requires `1 <= k <= points.len()`.
pub(crate) fn spherical_kmeans(points: &[Vec<f64>], k: usize, seed: u64, config: &KMeansConfig) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids, None)).collect();

    for _ in 0..config.max_iterations {
        reseed_empty(points, &mut centroids, &mut assignment);
        let shift = update_centroids(points, &assignment, &mut centroids);
        for (i, p) in points.iter().enumerate() {
            assignment[i] = nearest(p, &centroids, None);
        }
        if shift < config.tolerance {
            break;
        }
    }

    // Final pass against the final centroids: every point ends on a nearest
    // centroid and no cluster is empty.
    for _ in 0..=k {
        let changed = reseed_empty(points, &mut centroids, &mut assignment);
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let best = nearest(p, &centroids, Some(assignment[i]));
            moved |= best != assignment[i];
            assignment[i] = best;
        }
        if !changed && !moved {
            break;
        }
    }
    Clustering { centroids, assignment }
}
