//! Euclidean k-means (Lloyd iterations, k-means++ seeding).
//!
//! All sequential work (seeding scans, centroid accumulation) walks the points
//! in ascending id order, so the result depends on `(ids, points, params)` and
//! not on how the caller happened to order the slice. Assignment runs in
//! parallel; it is per-point and therefore independent of the worker count.
//!
//! The PRNG is ChaCha8 seeded with `seed` on stream `stream`; the trainer uses
//! one stream per epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KMeansError {
    #[error("cluster count {k} exceeds number of points {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("cluster count must be positive")]
    ZeroClusters,
    #[error("non-finite value in point {0}")]
    NonFinite(usize),
    #[error("dimension mismatch at point {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("ids and points differ in length ({ids} vs {points})")]
    IdCount { ids: usize, points: usize },
}

/// 64 clusters per label for binary tasks, 16 per label otherwise.
pub fn default_cluster_count(num_labels: usize) -> usize {
    if num_labels == 2 {
        64 * num_labels
    } else {
        16 * num_labels
    }
}

/// [`default_cluster_count`] capped at half the dataset size (at least 1).
pub fn capped_cluster_count(num_labels: usize, n: usize) -> usize {
    default_cluster_count(num_labels).min((n / 2).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub stream: u64,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid shift (Euclidean).
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            stream: 0,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per point, in the caller's point order.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Point indices grouped by cluster, ascending within each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            members[a].push(i);
        }
        members
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_dims<P: AsRef<[f64]>>(points: &[P], dim: usize) -> Result<(), KMeansError> {
    for (index, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(KMeansError::DimensionMismatch {
                index,
                expected: dim,
                found: p.len(),
            });
        }
    }
    Ok(())
}

/// Nearest centroid for each point; ties go to the lowest centroid index.
pub fn assign<P: AsRef<[f64]> + Sync>(
    points: &[P],
    centroids: &[Vec<f64>],
) -> Result<Vec<usize>, KMeansError> {
    if let Some(first) = centroids.first() {
        check_dims(centroids, first.len())?;
        check_dims(points, first.len())?;
    }
    Ok(points
        .par_iter()
        .map(|p| nearest(p.as_ref(), centroids).0)
        .collect())
}

/// Cluster `points` (one per id) into `params.k` groups.
pub fn kmeans_fit<P: AsRef<[f64]> + Sync>(
    points: &[P],
    ids: &[u64],
    params: &KMeansParams,
) -> Result<ClusterModel, KMeansError> {
    let n = points.len();
    let k = params.k;
    if ids.len() != n {
        return Err(KMeansError::IdCount {
            ids: ids.len(),
            points: n,
        });
    }
    if k == 0 {
        return Err(KMeansError::ZeroClusters);
    }
    if k > n {
        return Err(KMeansError::TooManyClusters { k, n });
    }
    let dim = points[0].as_ref().len();
    check_dims(points, dim)?;
    if let Some(i) = points
        .iter()
        .position(|p| p.as_ref().iter().any(|x| !x.is_finite()))
    {
        return Err(KMeansError::NonFinite(i));
    }

    // Work in id order; map back at the end.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ids[i]);
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_ref()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(params.stream);
    let mut centroids = kmeans_plus_plus(&sorted, k, &mut rng);

    let mut assignments = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> =
            sorted.par_iter().map(|p| nearest(p, &centroids)).collect();
        let mut next: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        let dists: Vec<f64> = nearest_all.iter().map(|&(_, d)| d).collect();
        repair_empty_clusters(&mut next, &dists, k);
        let unchanged = next == assignments;
        assignments = next;

        let updated = cluster_means(&sorted, &assignments, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = updated;
        inertia_trace.push(inertia(&sorted, &assignments, &centroids));
        if unchanged || shift < params.tol {
            converged = true;
            break;
        }
    }

    let mut out = vec![0; n];
    for (pos, &original) in order.iter().enumerate() {
        out[original] = assignments[pos];
    }
    Ok(ClusterModel {
        inertia: *inertia_trace.last().expect("at least one iteration"),
        centroids,
        assignments: out,
        inertia_trace,
        iterations,
        converged,
    })
}

/// D²-weighted seeding. The first centre is uniform; each further centre is
/// drawn with probability proportional to its squared distance from the nearest
/// chosen centre, by a cumulative scan in point order.
fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points
        .par_iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // every point coincides with a centre; take the first unused one
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        let centre = points[pick].to_vec();
        d2.par_iter_mut().zip(points.par_iter()).for_each(|(d, p)| {
            *d = d.min(squared_distance(p, &centre));
        });
        centroids.push(centre);
    }
    centroids
}

/// Move the farthest point of some multi-member cluster into each empty cluster.
fn repair_empty_clusters(assignments: &mut [usize], dists: &[f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut dists = dists.to_vec();
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            if best.is_none_or(|b| dists[i] > dists[b]) {
                best = Some(i);
            }
        }
        let i = best.expect("k <= n guarantees a cluster with two or more members");
        sizes[assignments[i]] -= 1;
        sizes[empty] += 1;
        assignments[i] = empty;
        dists[i] = 0.0;
    }
}

fn cluster_means(points: &[&[f64]], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        let inv = 1.0 / count as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
    }
    sums
}

fn inertia(points: &[&[f64]], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}
