use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};

/// Result of Lloyd's iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `n_list x d`
    pub centroids: Array2<f32>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub inertia: Vec<f64>,
}

const ASSIGN_CHUNK: usize = 4096;

/// Nearest centroid (squared L2) of every row, with the squared distance.
/// Ties go to the lower centroid index.
pub fn assign_nearest(data: ArrayView2<'_, f32>, centroids: ArrayView2<'_, f32>) -> (Vec<usize>, Vec<f32>) {
    let c_norms: Vec<f32> = centroids.rows().into_iter().map(|c| c.dot(&c)).collect();
    let mut assign = Vec::with_capacity(data.nrows());
    let mut dist = Vec::with_capacity(data.nrows());
    for chunk in data.axis_chunks_iter(Axis(0), ASSIGN_CHUNK) {
        let cross = chunk.dot(&centroids.t());
        for (row, x) in cross.rows().into_iter().zip(chunk.rows()) {
            let x_norm = x.dot(&x);
            let (mut best, mut best_d) = (0, f32::INFINITY);
            for (j, (&xc, &cn)) in row.iter().zip(&c_norms).enumerate() {
                let d = (x_norm + cn - 2.0 * xc).max(0.0);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            assign.push(best);
            dist.push(best_d);
        }
    }
    (assign, dist)
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations. Empty
/// clusters are re-seeded with the point farthest from its centroid.
pub fn kmeans(set: &EmbeddingSet, n_list: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = set.len();
    if n_list == 0 {
        return Err(Error::invalid("n_list must be positive"));
    }
    if n_list > n {
        return Err(Error::invalid(format!("n_list {n_list} exceeds {n} points")));
    }
    let data = set.matrix();
    let d = set.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++
    let mut centroids = Array2::<f32>::zeros((n_list, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut closest: Vec<f32> = data
        .rows()
        .into_iter()
        .map(|x| sq_dist(x.as_slice().unwrap(), data.row(first).as_slice().unwrap()))
        .collect();
    for c in 1..n_list {
        let total: f64 = closest.iter().map(|&v| v as f64).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in closest.iter().enumerate() {
                target -= v as f64;
                if target < 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all points coincide with a centroid already
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        let cp = data.row(pick);
        let cp = cp.as_slice().unwrap();
        for (v, x) in closest.iter_mut().zip(data.rows()) {
            *v = v.min(sq_dist(x.as_slice().unwrap(), cp));
        }
    }

    let mut inertia = Vec::new();
    let mut assignments: Vec<usize> = Vec::new();
    for _ in 0..iters.max(1) {
        let (assign, dist) = assign_nearest(data, centroids.view());
        inertia.push(dist.iter().map(|&v| v as f64).sum());
        let converged = assign == assignments;
        assignments = assign;
        if converged {
            break;
        }
        // update step
        let mut sums = Array2::<f64>::zeros((n_list, d));
        let mut counts = vec![0usize; n_list];
        for (x, &a) in data.rows().into_iter().zip(&assignments) {
            counts[a] += 1;
            let mut s = sums.row_mut(a);
            for (acc, &v) in s.iter_mut().zip(x) {
                *acc += v as f64;
            }
        }
        let mut dist = dist;
        for c in 0..n_list {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = (s * inv) as f32;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                centroids.row_mut(c).assign(&data.row(far));
                dist[far] = 0.0;
            }
        }
    }
    let (assignments, dist) = assign_nearest(data, centroids.view());
    let final_inertia: f64 = dist.iter().map(|&v| v as f64).sum();
    if inertia.last() != Some(&final_inertia) {
        inertia.push(final_inertia);
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
    })
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
