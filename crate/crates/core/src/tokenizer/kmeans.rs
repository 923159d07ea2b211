use rand::Rng;

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding and a fixed iteration count.
///
/// `points` is a flat `[n, dim]` buffer. Returns `k` centroids as a flat
/// `[k, dim]` buffer. Clusters that lose all points keep their previous
/// centroid.
pub fn kmeans<R: Rng>(points: &[f64], dim: usize, k: usize, iters: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("kmeans", format!("{} values are not rows of {dim}", points.len())));
    }
    let n = points.len() / dim;
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("kmeans with {n} points and k={k}")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let newest = centroids.len() - dim;
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[newest..]));
        }
    }

    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..n {
            let (c, _) = nearest(&centroids, dim, row(i));
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(centroids)
}

/// Mean squared distance from each point to its nearest centroid.
#[cfg(test)]
pub(crate) fn quantization_error(points: &[f64], dim: usize, centroids: &[f64]) -> f64 {
    let n = points.len() / dim;
    (0..n)
        .map(|i| nearest(centroids, dim, &points[i * dim..(i + 1) * dim]).1)
        .sum::<f64>()
        / n as f64
}
