use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum KMeansInit {
    /// `k` distinct data points drawn at random.
    Random,
    /// Exactly `k` caller-supplied centers.
    Seeded(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm until the assignment stops changing or `max_iter`
/// assignment steps have run. An empty cluster takes the point farthest
/// from its current center.
pub fn kmeans(points: &[Vec<f64>], k: usize, init: &KMeansInit, max_iter: usize, seed: u64) -> Result<ClusterResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Invalid(format!("k = {k} but only {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", "ragged points"));
    }
    let mut centers = match init {
        KMeansInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, points.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| points[i].clone()).collect::<Vec<_>>()
        }
        KMeansInit::Seeded(c) => {
            if c.len() != k || c.iter().any(|v| v.len() != dim) {
                return Err(Error::Invalid(format!(
                    "seeded k-means needs {k} centers of width {dim}"
                )));
            }
            c.clone()
        }
    };
    let mut assignments = vec![usize::MAX; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centers);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed && iterations > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // farthest point from its (updated) center moves to the empty cluster
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centers[assignments[a]]);
                        let db = sq_dist(&points[b], &centers[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                counts[assignments[far]] -= 1;
                centers[j] = points[far].clone();
                assignments[far] = j;
                counts[j] = 1;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    Ok(ClusterResult {
        assignments,
        centers,
        inertia,
        history,
        iterations,
    })
}
