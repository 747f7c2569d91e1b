//! Balanced k-means over every subspace slice of an embedding pool, used to
//! initialize the shared codebook.
//!
//! Assignment is a greedy capacity-constrained pass: points are visited in
//! order of how much they lose by not getting their nearest centroid, and each
//! takes the nearest centroid that still has room. Cluster sizes always land
//! in `{floor(M/K), ceil(M/K)}`.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CurpError, Result};
use crate::types::{squared_distance, Codebook, CodebookSpec, EmbeddingPool};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedAssignment {
    pub labels: Vec<usize>,
    /// Upper bound on each cluster's size for this pass.
    pub capacities: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl BalancedAssignment {
    pub fn size_spread(&self) -> usize {
        let max = self.sizes.iter().copied().max().unwrap_or(0);
        let min = self.sizes.iter().copied().min().unwrap_or(0);
        max - min
    }
}

/// Capacity-constrained nearest-centroid assignment of `points`
/// (`M x sub_dim`, row-major) to the rows of `centroids`.
pub fn assign_balanced(points: &[f64], centroids: &Codebook) -> Result<BalancedAssignment> {
    let sd = centroids.sub_dim();
    let k = centroids.vocab_size();
    if points.len() % sd != 0 {
        return Err(CurpError::DimMismatch {
            expected: sd,
            got: points.len() % sd,
        });
    }
    let m = points.len() / sd;
    if m < k {
        return Err(CurpError::TooFewPoints { points: m, clusters: k });
    }

    let mut dists = vec![0.0; m * k];
    for (p, row) in points.chunks_exact(sd).enumerate() {
        for (c, cent) in centroids.rows().enumerate() {
            dists[p * k + c] = squared_distance(row, cent);
        }
    }

    // Regret = second-nearest minus nearest distance.
    let margins: Vec<f64> = dists
        .chunks_exact(k)
        .map(|d| {
            let (mut best, mut second) = (f64::INFINITY, f64::INFINITY);
            for &v in d {
                if v < best {
                    second = best;
                    best = v;
                } else if v < second {
                    second = v;
                }
            }
            second - best
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        margins[b]
            .partial_cmp(&margins[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let floor = m / k;
    let extra = m % k;
    let ceil = if extra == 0 { floor } else { floor + 1 };
    let mut capacities = vec![ceil; k];
    let mut sizes = vec![0usize; k];
    let mut labels = vec![usize::MAX; m];
    let mut at_ceil = 0usize;

    for &p in &order {
        let d = &dists[p * k..(p + 1) * k];
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            if sizes[c] < capacities[c] && (best == usize::MAX || d[c] < best_d) {
                best = c;
                best_d = d[c];
            }
        }
        debug_assert!(best != usize::MAX, "total capacity covers every point");
        labels[p] = best;
        sizes[best] += 1;
        if extra > 0 && sizes[best] == ceil {
            at_ceil += 1;
            if at_ceil == extra {
                // All oversized slots are taken; shrink the rest to floor.
                for c in 0..k {
                    if sizes[c] < ceil {
                        capacities[c] = floor;
                    }
                }
            }
        }
    }

    Ok(BalancedAssignment {
        labels,
        capacities,
        sizes,
    })
}

/// Per-cluster means of the assigned points. Clusters with no points keep
/// their row from `previous`.
pub fn update_centroids(
    points: &[f64],
    assignment: &BalancedAssignment,
    previous: &Codebook,
) -> Result<Codebook> {
    let sd = previous.sub_dim();
    let k = previous.vocab_size();
    if points.len() != assignment.labels.len() * sd {
        return Err(CurpError::DimMismatch {
            expected: assignment.labels.len() * sd,
            got: points.len(),
        });
    }
    let mut sums = vec![0.0; k * sd];
    let mut counts = vec![0usize; k];
    for (row, &label) in points.chunks_exact(sd).zip(&assignment.labels) {
        if label >= k {
            return Err(CurpError::IndexOutOfRange {
                index: label as u64,
                bound: k,
            });
        }
        counts[label] += 1;
        for (s, v) in sums[label * sd..(label + 1) * sd].iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut entries = previous.entries().to_vec();
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let n = counts[c] as f64;
        for j in 0..sd {
            entries[c * sd + j] = sums[c * sd + j] / n;
        }
    }
    Codebook::new(*previous.spec(), entries)
}

/// Sum of squared distances from each point to its assigned centroid.
pub fn kmeans_objective(points: &[f64], labels: &[usize], centroids: &Codebook) -> f64 {
    points
        .chunks_exact(centroids.sub_dim())
        .zip(labels)
        .map(|(p, &l)| squared_distance(p, centroids.entry(l)))
        .sum()
}

/// k-means++ seeding: the first centroid is uniform, each following one is
/// drawn with probability proportional to its squared distance from the
/// nearest centroid chosen so far. Duplicate points have zero weight, so the
/// picks are distinct whenever the pool has at least `K` distinct vectors.
pub fn farthest_point_seeds(points: &[f64], spec: &CodebookSpec, seed: u64) -> Result<Codebook> {
    let sd = spec.sub_dim();
    let k = spec.vocab_size();
    let m = points.len() / sd;
    if m < k {
        return Err(CurpError::TooFewPoints { points: m, clusters: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| &points[i * sd..(i + 1) * sd];

    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; m];
    let first = rng.random_range(0..m);
    chosen.push(first);
    taken[first] = true;
    let mut nearest: Vec<f64> = (0..m).map(|i| squared_distance(row(i), row(first))).collect();

    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Fewer than K distinct vectors: fall back to an unused index.
            let free: Vec<usize> = (0..m).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        taken[pick] = true;
        for i in 0..m {
            let d = squared_distance(row(i), row(pick));
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }

    let mut entries = Vec::with_capacity(k * sd);
    for &i in &chosen {
        entries.extend_from_slice(row(i));
    }
    Codebook::new(*spec, entries)
}

/// Everything produced by a balanced k-means run.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub codebook: Codebook,
    pub assignment: BalancedAssignment,
    /// Objective after each (assign, update) pair.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

pub fn init_balanced_kmeans(
    pool: &EmbeddingPool,
    spec: &CodebookSpec,
    max_iters: usize,
    seed: u64,
) -> Result<Codebook> {
    Ok(run_balanced_kmeans(pool, spec, max_iters, seed)?.codebook)
}

/// Alternates balanced assignment and centroid updates until the labels stop
/// changing or `max_iters` updates have run.
///
/// A reassignment that would raise the objective under the current centroids
/// is rejected and the run stops there, so the recorded objectives never
/// increase.
pub fn run_balanced_kmeans(
    pool: &EmbeddingPool,
    spec: &CodebookSpec,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansRun> {
    pool.check_spec(spec)?;
    let points = pool.subspace_matrix(spec)?;
    let m = pool.count() * spec.num_subspaces();
    if m < spec.vocab_size() {
        return Err(CurpError::TooFewPoints {
            points: m,
            clusters: spec.vocab_size(),
        });
    }

    let mut centroids = farthest_point_seeds(&points, spec, seed)?;
    let mut assignment = assign_balanced(&points, &centroids)?;
    let mut objectives = Vec::new();
    let mut iterations = 0;

    while iterations < max_iters {
        centroids = update_centroids(&points, &assignment, &centroids)?;
        iterations += 1;
        let objective = kmeans_objective(&points, &assignment.labels, &centroids);
        objectives.push(objective);

        let next = assign_balanced(&points, &centroids)?;
        if next.labels == assignment.labels {
            break;
        }
        if kmeans_objective(&points, &next.labels, &centroids) > objective {
            break;
        }
        assignment = next;
    }

    Ok(KMeansRun {
        codebook: centroids,
        assignment,
        objectives,
        iterations,
    })
}

/// Codebook with entries drawn uniformly in `[low, high]`; the unbalanced
/// baseline initializer.
pub fn random_uniform_codebook(spec: &CodebookSpec, low: f64, high: f64, seed: u64) -> Result<Codebook> {
    if !(low.is_finite() && high.is_finite() && low < high) {
        return Err(CurpError::InvalidConfig(format!("bad range [{low}, {high}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..spec.vocab_size() * spec.sub_dim())
        .map(|_| rng.random_range(low..=high))
        .collect();
    Codebook::new(*spec, entries)
}
