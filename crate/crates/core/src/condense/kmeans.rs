use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{l2_normalize_rows, CondenseError, PointCloud};

pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<u32>,
    /// `k x dim`, row-major.
    pub centers: Vec<f64>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn nearest(p: &[f64], centers: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on unit-normalized points.
pub fn kmeans_detailed(x: &PointCloud, k: usize, seed: u64) -> Result<KMeansResult, CondenseError> {
    if k == 0 {
        return Err(CondenseError::ZeroK);
    }
    let (n, dim) = (x.len(), x.dim());
    if k > n {
        return Err(CondenseError::KTooLarge { k, n });
    }
    let mut pts = x.points().to_vec();
    l2_normalize_rows(&mut pts, dim);
    let row = |i: usize| &pts[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend_from_slice(&c);
    }

    let mut labels = vec![u32::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (c, d) = nearest(row(i), &centers, dim);
            total += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = labels[i] as usize;
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]).for_each(|(m, s)| *m = s * inv);
            }
        }
    }
    Ok(KMeansResult { labels, centers, inertia })
}

/// Cluster labels in `0..k` for every point.
pub fn spectral_kmeans(x: &PointCloud, k: usize, seed: u64) -> Result<Vec<u32>, CondenseError> {
    kmeans_detailed(x, k, seed).map(|r| r.labels)
}
