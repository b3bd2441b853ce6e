//! Seeded k-means++ used to initialise mixture responsibilities.

use rand::Rng;

/// Squared distance between two equal-length rows.
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = dist2(row, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by at most `lloyd_iters` Lloyd refinements.
/// Returns the cluster label of every row. Clusters that lose all their
/// points keep their previous center.
pub fn kmeans_pp<R: Rng>(
    rows: &[&[f64]],
    k: usize,
    lloyd_iters: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = rows.len();
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[pick].to_vec());
        let c = centers.last().unwrap();
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(dist2(r, c));
        }
    }

    let mut labels: Vec<usize> = rows.iter().map(|r| nearest(r, &centers).0).collect();
    let dim = rows[0].len();
    for _ in 0..lloyd_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(r.iter()) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = rows.iter().map(|r| nearest(r, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}
