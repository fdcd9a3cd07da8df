use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f32>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn nearest(p: &[f32], centroids: &[Vec<f32>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic for a given `seed`. An emptied cluster is re-seeded with the
/// point farthest from its centroid.
pub fn kmeans(points: &[Vec<f32>], k: usize, max_iter: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Cluster(format!("k = {k} with {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Cluster("points of unequal dimension".into()));
    }
    let mut rng = Rng::new(seed);
    let mut centroids = vec![points[rng.below(n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() as f64 * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centroids[labels[a]]);
                        let db = dist2(&points[b], &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            } else {
                centroids[c] = sums[c]
                    .iter()
                    .map(|s| (s / counts[c] as f64) as f32)
                    .collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, &centroids[l]))
        .sum();
    Ok(KMeans {
        labels,
        centroids,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let pts: Vec<Vec<f32>> = vec![
            vec![0.0, 0.1],
            vec![10.0, 10.0],
            vec![0.1, 0.0],
            vec![9.8, 10.1],
        ];
        let r = kmeans(&pts, 2, 100, 0).unwrap();
        assert_eq!(r.labels[0], r.labels[2]);
        assert_eq!(r.labels[1], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[1]);
    }

    #[test]
    fn deterministic_and_k_equals_n() {
        let pts: Vec<Vec<f32>> = (0..9).map(|i| vec![(i * i) as f32]).collect();
        let a = kmeans(&pts, 3, 100, 0).unwrap();
        assert_eq!(a, kmeans(&pts, 3, 100, 0).unwrap());
        let b = kmeans(&pts, 9, 100, 0).unwrap();
        assert_eq!(b.inertia, 0.0);
        assert!(kmeans(&pts, 10, 100, 0).is_err());
    }
}
