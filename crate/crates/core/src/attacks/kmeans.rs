use rand::Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Returns centroids.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let k = k.min(points.len());
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&i, &j| sq_dist(p, &centroids[i]).total_cmp(&sq_dist(p, &centroids[j])))
                .expect("k > 0");
            changed |= *a != best;
            *a = best;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            // empty clusters keep their previous centre
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    centroids
}

/// Indices of the points closest to each of `k` centroids, without repeats,
/// in ascending order.
pub fn representative_samples(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let centroids = kmeans(points, k, 100, rng);
    let mut taken = vec![false; points.len()];
    let mut out = Vec::with_capacity(centroids.len());
    for c in &centroids {
        if let Some(i) = (0..points.len())
            .filter(|&i| !taken[i])
            .min_by(|&i, &j| sq_dist(&points[i], c).total_cmp(&sq_dist(&points[j], c)))
        {
            taken[i] = true;
            out.push(i);
        }
    }
    out.sort_unstable();
    out
}
