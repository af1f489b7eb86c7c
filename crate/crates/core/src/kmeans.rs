//! Lloyd's k-means with k-means++ seeding.
//!
//! Distances are squared Euclidean in `f64`. Assignment ties go to the lowest
//! center index. An empty cluster keeps its previous center, which keeps the
//! inertia non-increasing from one iteration to the next.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| f64::from(v)).collect()
}

fn plus_plus_init(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.num_rows();
    let first = rng.gen_range(0..n);
    let mut centers = vec![to_f64(points.row(first))];
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut d2: Vec<f64> = points.rows().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a center: take the lowest unused index
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = to_f64(points.row(pick));
        for (d, r) in d2.iter_mut().zip(points.rows()) {
            *d = d.min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    centers
}

pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if points.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "kmeans expects an [n, E] matrix, got {:?}",
            points.shape()
        )));
    }
    let n = points.num_rows();
    if k == 0 || k > n {
        return Err(Error::Input(format!("kmeans needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let e = points.last_dim();

    let mut assignment: Vec<usize> = points.rows().map(|r| nearest(r, &centers).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        // update step
        let mut sums = vec![vec![0f64; e]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in points.rows().zip(&assignment) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(r) {
                *s += f64::from(v);
            }
        }
        for (c, (s, &cnt)) in centers.iter_mut().zip(sums.into_iter().zip(&counts)) {
            if cnt > 0 {
                *c = s.into_iter().map(|v| v / cnt as f64).collect();
            }
        }
        // assignment step
        let mut inertia = 0.0;
        let mut changed = false;
        for (r, a) in points.rows().zip(assignment.iter_mut()) {
            let (best, d) = nearest(r, &centers);
            // keep the current cluster on exact ties
            let current = sq_dist(r, &centers[*a]);
            let (best, d) = if current <= d { (*a, current) } else { (best, d) };
            if best != *a {
                changed = true;
                *a = best;
            }
            inertia += d;
        }
        history.push(inertia);
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        inertia: *history.last().expect("at least one iteration"),
        centers,
        assignment,
        history,
        iterations,
    })
}
